#![no_main]

use covmerge::io::parse_marker_matrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&ploidy, rest)) = data.split_first() else { return };
    if let Ok(m) = parse_marker_matrix(rest, u32::from(ploidy % 8)) {
        let _ = m.mean_impute();
    }
});
