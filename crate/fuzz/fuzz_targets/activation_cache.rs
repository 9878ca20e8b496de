#![no_main]

use gradeprobe::store::decode_entry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // decoding must never panic or over-allocate, whatever the bytes
    let _ = decode_entry(data, "fingerprint");
});
