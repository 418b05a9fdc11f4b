#![no_main]
use lamward::episode_io::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(eps) = decode_dataset(data) {
        let bytes = encode_dataset(&eps);
        let again = decode_dataset(&bytes).expect("re-encoded dataset decodes");
        assert_eq!(encode_dataset(&again), bytes);
    }
});
