#![no_main]

use libfuzzer_sys::fuzz_target;
use sintermon::scoring::parse_scores_csv;

fuzz_target!(|data: &[u8]| {
    let _ = parse_scores_csv(data);
});
