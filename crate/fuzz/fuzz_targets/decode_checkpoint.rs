#![no_main]

use libfuzzer_sys::fuzz_target;
use refdiff_core::nn::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ck);
        decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
    }
});
