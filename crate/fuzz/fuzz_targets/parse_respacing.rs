#![no_main]

use libfuzzer_sys::fuzz_target;
use refdiff_core::{NoiseSchedule, Respacing};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = Respacing::parse(text) {
        let parent = NoiseSchedule::linear(1000).expect("linear schedule");
        let _ = r.apply(&parent);
    }
});
