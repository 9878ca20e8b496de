//! gradeprobe: a red-teaming toolkit for LLM evaluators.
//!
//! The toolkit trains linear probes that predict grading outcomes from
//! hidden activations, optimizes adversarial input suffixes that amplify the
//! high-score activation direction, prunes and analyzes those suffixes, and
//! evaluates chat-template mitigations. A deterministic toy transformer
//! backend keeps every experiment CPU-runnable and reproducible.

pub mod backend;
pub mod experiments;
pub mod gcg;
pub mod harness;
pub mod probe;
pub mod store;
pub mod synthetic;
pub mod token;
pub mod util;

pub use backend::{
    ActivationProbePoint, BackendError, BlackBoxBackend, GenerationConfig, TokenPosition,
    WhiteBoxBackend, WhiteBoxCapabilities,
};
pub use token::{token_filter_ascii, TokenSequence, Tokenizer, ToyTokenizer};
