#![no_main]

use gradeprobe::probe::load_probe;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = load_probe(std::io::Cursor::new(data));
});
