#![no_main]
use lamward::episode_io::{decode_episode, encode_episode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ep) = decode_episode(data) {
        ep.check().expect("decoded episodes are well formed");
        let bytes = encode_episode(&ep);
        let again = decode_episode(&bytes).expect("re-encoded episode decodes");
        assert_eq!(encode_episode(&again), bytes);
    }
});
