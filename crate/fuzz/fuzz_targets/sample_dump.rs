#![no_main]
use lamward::sampler::SampleDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = SampleDump::decode(data) {
        let bytes = dump.encode();
        assert_eq!(SampleDump::decode(&bytes).expect("re-encoded dump decodes").encode(), bytes);
    }
});
