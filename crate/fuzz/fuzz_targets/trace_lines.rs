#![no_main]
use libfuzzer_sys::fuzz_target;
use gse_core::harness::io::parse_traces;

fuzz_target!(|data: &str| {
    if let Ok(runs) = parse_traces(data) {
        for r in runs {
            let _ = r.trace.map_answer();
            let _ = r.lines();
        }
    }
});
