//! Evaluator backend contracts.
//!
//! White-box backends expose forward passes with residual-stream capture,
//! gradients at one-hot token inputs, and sampling. Black-box backends expose
//! only text-in / text-out generation; transfer experiments compile against
//! the black-box contract alone.

pub mod http;
pub mod registry;
pub mod stub;
pub mod toy;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::TokenSequence;

/// Where in the network an activation vector is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActivationProbePoint {
    /// Residual-stream index: 0 is the embedding stream, `i > 0` is the
    /// output of block `i` after its final residual addition.
    pub layer_index: usize,
    pub token_position: TokenPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenPosition {
    EndOfEssay,
    EndOfInput,
    Explicit(usize),
}

impl TokenPosition {
    /// Resolves to an absolute index for a prompt of length `seq_len` whose
    /// essay region ends at `essay_end` (index of its last token).
    pub fn resolve(&self, seq_len: usize, essay_end: Option<usize>) -> Result<usize, BackendError> {
        match *self {
            TokenPosition::EndOfInput => Ok(seq_len.checked_sub(1).ok_or(
                BackendError::InvalidProbePoint("empty prompt".into()),
            )?),
            TokenPosition::Explicit(i) if i < seq_len => Ok(i),
            TokenPosition::Explicit(i) => Err(BackendError::InvalidProbePoint(format!(
                "explicit position {i} out of range for length {seq_len}"
            ))),
            TokenPosition::EndOfEssay => essay_end
                .filter(|&i| i < seq_len)
                .ok_or_else(|| {
                    BackendError::InvalidProbePoint("no essay span available".into())
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhiteBoxCapabilities {
    pub vocab_size: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    pub supports_gradients: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub sample_count: usize,
    pub random_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_new_tokens: 16,
            sample_count: 8,
            random_seed: 0,
        }
    }
}

/// Scalar loss over a captured activation, used for one-hot gradients.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Negated inner product of the activation at `point` with `target`.
    NegatedInnerProduct {
        point: ActivationProbePoint,
        target: Array1<f64>,
    },
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid probe point: {0}")]
    InvalidProbePoint(String),
    #[error("backend is not white-box")]
    BackendNotWhiteBox,
    #[error("loss specification is not differentiable: {0}")]
    NonDifferentiableLoss(String),
    #[error("backend unavailable after {retries} retries: {message}")]
    BackendUnavailable { message: String, retries: u32 },
    #[error("prompt of {got} tokens exceeds context length {max}")]
    ContextLengthExceeded { got: usize, max: usize },
    #[error("suffix slice {0}..{1} out of prompt bounds (len {2})")]
    SuffixOutOfBounds(usize, usize, usize),
    #[error("token id {0} out of vocabulary (size {1})")]
    TokenOutOfRange(u32, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Text-in / text-out contract. Every backend implements this.
pub trait BlackBoxBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Returns exactly `config.sample_count` output strings.
    fn generate(&self, prompt: &str, config: &GenerationConfig)
        -> Result<Vec<String>, BackendError>;
}

/// White-box contract: activation capture and one-hot gradients on top of
/// generation. Methods take `&self`; an instance holds no mutable state, so a
/// single instance may be shared read-only by parallel workers.
pub trait WhiteBoxBackend: BlackBoxBackend {
    fn capabilities(&self) -> WhiteBoxCapabilities;

    /// Stable fingerprint of the weights, for activation-cache invalidation.
    fn fingerprint(&self) -> String;

    /// Residual-stream vectors at each requested point. Bit-identical across
    /// repeated calls with identical input.
    fn forward_with_capture(
        &self,
        prompt: &TokenSequence,
        points: &[ActivationProbePoint],
    ) -> Result<BTreeMap<ActivationProbePoint, Array1<f64>>, BackendError>;

    /// Like `forward_with_capture` but with a known essay-end token index so
    /// `TokenPosition::EndOfEssay` resolves.
    fn forward_with_capture_at(
        &self,
        prompt: &TokenSequence,
        essay_end: Option<usize>,
        points: &[ActivationProbePoint],
    ) -> Result<BTreeMap<ActivationProbePoint, Array1<f64>>, BackendError>;

    /// Gradient of the scalar loss with respect to the one-hot token inputs
    /// over `suffix_slice`. Entry `(i, v)` approximates, to first order, the
    /// change in loss from substituting token `v` at suffix position `i`.
    fn loss_gradient_at_onehot(
        &self,
        prompt: &TokenSequence,
        suffix_slice: std::ops::Range<usize>,
        loss: &LossSpec,
    ) -> Result<Array2<f64>, BackendError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_positions() {
        assert_eq!(TokenPosition::EndOfInput.resolve(5, None).unwrap(), 4);
        assert_eq!(TokenPosition::Explicit(2).resolve(5, None).unwrap(), 2);
        assert!(TokenPosition::Explicit(5).resolve(5, None).is_err());
        assert_eq!(TokenPosition::EndOfEssay.resolve(5, Some(3)).unwrap(), 3);
        assert!(TokenPosition::EndOfEssay.resolve(5, None).is_err());
    }
}
