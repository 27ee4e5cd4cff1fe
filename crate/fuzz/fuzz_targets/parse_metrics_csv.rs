#![no_main]

use libfuzzer_sys::fuzz_target;
use refdiff::report::{metrics_csv, parse_metrics_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(reports) = parse_metrics_csv(data) {
        let bytes = metrics_csv(&reports).expect("parsed reports serialise");
        let again = parse_metrics_csv(&bytes).expect("serialised reports parse");
        assert_eq!(again.len(), reports.len());
    }
});
