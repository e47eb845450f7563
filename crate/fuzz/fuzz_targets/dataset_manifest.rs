#![no_main]

use libfuzzer_sys::fuzz_target;
use sintermon::synth::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = DatasetManifest::from_json_slice(data) {
        let _ = m.layer(0);
    }
});
