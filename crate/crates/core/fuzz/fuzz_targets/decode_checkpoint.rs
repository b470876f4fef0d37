#![no_main]

use libfuzzer_sys::fuzz_target;
use tempedit::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        // anything accepted must re-encode to an equal checkpoint
        let again = encode_checkpoint(&ckpt.params, &ckpt.configs).unwrap();
        assert_eq!(decode_checkpoint(&again).unwrap(), ckpt);
    }
});
