#![no_main]

use gradeprobe::backend::toy::{ToyConfig, ToyTransformer};
use gradeprobe::token::ToyTokenizer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut model = ToyTransformer::new(
        "fuzz",
        ToyConfig {
            vocab_size: 64,
            hidden_dim: 8,
            depth: 2,
            max_seq_len: 32,
            mlp_hidden: 16,
            seed: 1,
        },
        ToyTokenizer::printable(64),
    );
    let _ = model.load_weights(std::io::Cursor::new(data));
});
