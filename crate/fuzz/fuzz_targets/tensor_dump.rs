#![no_main]

use layoutguide::io::TensorDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = TensorDump::decode(data) {
        assert_eq!(t.encode(), data);
    }
});
