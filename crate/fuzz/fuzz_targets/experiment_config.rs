#![no_main]

use libfuzzer_sys::fuzz_target;
use sintermon_cli::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = ExperimentConfig::from_json_slice(data) {
        let back = ExperimentConfig::from_json_slice(c.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back, c);
    }
});
