#![no_main]
use libfuzzer_sys::fuzz_target;
use gse_core::harness::ExperimentPlan;

fuzz_target!(|data: &str| {
    if let Ok(plan) = ExperimentPlan::from_toml(data) {
        let _ = plan.validate();
        let text = plan.to_toml().expect("parsed plans serialize");
        let again = ExperimentPlan::from_toml(&text).expect("round trip");
        assert_eq!(again.to_toml().unwrap(), text);
    }
});
