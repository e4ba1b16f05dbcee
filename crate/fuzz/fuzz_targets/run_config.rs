#![no_main]

use layoutguide::io::{format_run_config, parse_run_config};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_run_config(text) {
        let out = format_run_config(&cfg).expect("valid configs serialize");
        assert_eq!(parse_run_config(&out).expect("formatted config parses"), cfg);
    }
});
