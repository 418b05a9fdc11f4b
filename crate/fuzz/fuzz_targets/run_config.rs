#![no_main]
use lamward::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        let canonical = cfg.to_toml();
        let back = RunConfig::from_toml(&canonical).expect("canonical config parses");
        assert_eq!(back.to_toml(), canonical);
        assert_eq!(back.digest(), cfg.digest());
    }
});
