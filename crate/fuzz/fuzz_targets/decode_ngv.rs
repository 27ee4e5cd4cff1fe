#![no_main]

use libfuzzer_sys::fuzz_target;
use refdiff_core::io::{decode_ngv, encode_ngv};

fuzz_target!(|data: &[u8]| {
    if let Ok(case) = decode_ngv(data) {
        let again = decode_ngv(&encode_ngv(&case)).expect("re-encoded record decodes");
        assert_eq!(again.labels, case.labels);
        assert_eq!(again.subject_id, case.subject_id);
    }
});
