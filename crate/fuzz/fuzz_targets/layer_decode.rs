#![no_main]

use libfuzzer_sys::fuzz_target;
use sintermon::synth::decode_layer_bytes;

fuzz_target!(|data: &[u8]| {
    let _ = decode_layer_bytes(data, data.len() / 4);
    let _ = decode_layer_bytes(data, data.len() / 4 + 1);
});
