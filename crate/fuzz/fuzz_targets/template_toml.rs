#![no_main]

use gradeprobe::harness::template::PromptTemplate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(t) = PromptTemplate::from_toml(text) {
        // validated templates always expose a final answer label
        assert!(t.final_label().ends_with(':'));
    }
});
