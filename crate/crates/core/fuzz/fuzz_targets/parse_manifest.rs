#![no_main]

use libfuzzer_sys::fuzz_target;
use tempedit::worldgen::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_manifest(data) {
        let json = m.to_json().unwrap();
        assert_eq!(parse_manifest(json.as_bytes()).unwrap(), m);
    }
});
