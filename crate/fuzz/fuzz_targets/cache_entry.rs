#![no_main]

use libfuzzer_sys::fuzz_target;
use maskserve_core::cache::{decode_entry, encode_entry};

fuzz_target!(|data: &[u8]| {
    let Ok((key, blob)) = decode_entry(data) else {
        return;
    };
    let bytes = encode_entry(&key, &blob).expect("re-encode decoded entry");
    let (key2, blob2) = decode_entry(&bytes).expect("decode re-encoded entry");
    assert_eq!(key, key2);
    assert_eq!(blob, blob2);
});
