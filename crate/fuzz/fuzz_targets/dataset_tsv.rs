#![no_main]

use gradeprobe::harness::problem::EssayProblem;
use gradeprobe::store::parse_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let problems = vec![
        EssayProblem::new(
            "1",
            "s1",
            (1..=6).map(|s| (s, format!("c{s}"))).collect(),
            1,
            6,
            "d1",
        )
        .unwrap(),
        EssayProblem::new(
            "2",
            "s2",
            (0..=3).map(|s| (s, format!("c{s}"))).collect(),
            0,
            3,
            "d2",
        )
        .unwrap(),
    ];
    if let Ok((store, report)) = parse_dataset(text, &problems) {
        assert_eq!(store.len(), report.ingested);
    }
});
