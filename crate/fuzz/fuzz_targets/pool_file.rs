#![no_main]
use libfuzzer_sys::fuzz_target;
use gse_core::harness::Pool;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(pool) = Pool::parse(text) {
            for t in &pool.tasks {
                let _ = t.check_shape(pool.header.testbed.shape());
            }
        }
    }
});
