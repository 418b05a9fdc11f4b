#![no_main]
use lamward::checkpoint::{bundle_from_container, decode, encode};
use lamward::controller::Controller;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = decode(data) {
        let bytes = encode(&c);
        assert_eq!(encode(&decode(&bytes).expect("re-encoded container decodes")), bytes);
        let _ = bundle_from_container(&c);
        let _ = Controller::from_container(&c);
    }
});
