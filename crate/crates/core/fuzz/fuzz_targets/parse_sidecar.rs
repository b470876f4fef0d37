#![no_main]

use libfuzzer_sys::fuzz_target;
use tempedit::codec::ppm::parse_sidecar;

fuzz_target!(|data: &[u8]| {
    let _ = parse_sidecar(data);
});
