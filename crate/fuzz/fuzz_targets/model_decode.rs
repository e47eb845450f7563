#![no_main]

use libfuzzer_sys::fuzz_target;
use sintermon::model::{decode_model, ModelManifest};

// Input layout: u16 little-endian manifest length, manifest JSON, weights.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let len = u16::from_le_bytes([data[0], data[1]]) as usize;
    let Some(json) = data.get(2..2 + len) else { return };
    let weights = &data[2 + len..];
    if let Ok(manifest) = ModelManifest::from_json_slice(json) {
        let _ = decode_model(&manifest, weights);
    }
});
