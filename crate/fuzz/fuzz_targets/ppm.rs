#![no_main]

use layoutguide::io::{decode_ppm, encode_ppm, GammaMap};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm(data) {
        assert_eq!(img.channels(), 3);
        assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let bytes = encode_ppm(&img, GammaMap::Linear).expect("decoded images encode");
        assert_eq!(decode_ppm(&bytes).expect("re-decode").shape(), img.shape());
    }
});
