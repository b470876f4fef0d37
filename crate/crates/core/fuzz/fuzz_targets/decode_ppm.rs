#![no_main]

use libfuzzer_sys::fuzz_target;
use tempedit::codec::ppm::{decode_ppm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_ppm(data) {
        assert_eq!(frame.shape()[0], 3);
        assert!(frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bytes = encode_ppm(&frame).unwrap();
        assert_eq!(decode_ppm(&bytes).unwrap(), frame);
    }
});
