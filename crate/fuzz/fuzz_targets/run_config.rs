#![no_main]

use gradeprobe::store::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = toml::from_str::<RunConfig>(text) {
        // hashing the canonical form must be stable for anything that parsed
        assert_eq!(cfg.content_hash(), cfg.content_hash());
        let _ = cfg.validate();
    }
});
