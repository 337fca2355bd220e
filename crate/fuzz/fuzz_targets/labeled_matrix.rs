#![no_main]

use covmerge::io::{parse_labeled_matrix, write_labeled_matrix};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that parses must survive a write/read round trip.
    if let Ok(m) = parse_labeled_matrix(data) {
        let mut buf = Vec::new();
        write_labeled_matrix(&m, &mut buf).unwrap();
        let back = parse_labeled_matrix(&buf).unwrap();
        assert_eq!(back, m);
    }
});
