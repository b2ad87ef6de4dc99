#![no_main]
use libfuzzer_sys::fuzz_target;
use gse_core::harness::io::{parse_summary, summary_to_csv};

fuzz_target!(|data: &str| {
    if let Ok(rows) = parse_summary(data) {
        let text = summary_to_csv(&rows).expect("parsed rows serialize");
        let _ = parse_summary(&text).expect("round trip");
    }
});
