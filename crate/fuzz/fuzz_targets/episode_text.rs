#![no_main]
use lamward::episode_io::{episode_from_text, episode_to_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ep) = episode_from_text(text) {
        let text = episode_to_text(&ep);
        let again = episode_from_text(&text).expect("printed episode parses");
        assert_eq!(episode_to_text(&again), text);
    }
});
