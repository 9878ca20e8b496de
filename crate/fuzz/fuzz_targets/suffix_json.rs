#![no_main]

use gradeprobe::gcg::SuffixCandidate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<SuffixCandidate>(data) {
        // round-trip must succeed for anything that parsed
        let _ = serde_json::to_vec(&c).unwrap();
    }
});
