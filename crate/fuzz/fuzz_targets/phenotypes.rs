#![no_main]

use covmerge::io::parse_phenotypes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_phenotypes(data);
});
