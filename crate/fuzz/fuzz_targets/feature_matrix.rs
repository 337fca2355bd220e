#![no_main]

use covmerge::io::parse_feature_matrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(x) = parse_feature_matrix(data) {
        assert!(x.observed_fraction() > 0.0);
    }
});
