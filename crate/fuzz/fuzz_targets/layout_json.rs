#![no_main]

use layoutguide::io::{format_layout, parse_layout};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(layout) = parse_layout(text) {
        let canonical = format_layout(&layout).expect("parsed layouts are valid");
        let again = parse_layout(&canonical).expect("canonical form parses");
        assert_eq!(again, layout);
        assert_eq!(format_layout(&again).unwrap(), canonical);
    }
});
