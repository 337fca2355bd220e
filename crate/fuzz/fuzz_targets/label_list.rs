#![no_main]

use covmerge::io::parse_label_list;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = parse_label_list(data) {
        assert!(labels.iter().all(|l| !l.is_empty()));
    }
});
