//! Representation-targeted GCG suffix search and redundant-token pruning.
//!
//! The optimizer minimizes the negated inner product between a prompt's
//! end-of-input residual activation and a target direction. Each step takes
//! the gradient of that loss with respect to the one-hot suffix tokens,
//! samples single-token substitutions from the per-position top-k gradient
//! candidates, evaluates the true loss of each substituted suffix, and keeps
//! the incumbent unless a candidate is strictly better. Restarts run in
//! parallel from derived seeds. After optimization, tokens whose removal does
//! not hurt the measured score gain are pruned in a single pass.

use std::ops::Range;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    ActivationProbePoint, BackendError, BlackBoxBackend, GenerationConfig, TokenPosition,
    WhiteBoxBackend,
};
use crate::harness::gain::{measure_gain_rows, EvalCell};
use crate::harness::problem::{EssayProblem, EssayRecord};
use crate::harness::template::{render_prompt, PromptTemplate, RenderError};
use crate::probe::TargetDirection;
use crate::token::{TokenSequence, Tokenizer};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum GcgError {
    #[error("allowed token set too small for top_k={top_k}")]
    EmptyCandidateSet { top_k: usize },
    #[error("no attack bundles supplied")]
    EmptyTrainingSet,
    #[error("suffix must contain at least one token")]
    EmptySuffix,
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcgConfig {
    pub suffix_length: usize,
    pub iterations: usize,
    pub top_k: usize,
    /// Independent single-token substitution trials evaluated per step.
    pub candidates_per_step: usize,
    pub restarts: usize,
    /// Token ids the suffix may use. Typically the ASCII filter minus the
    /// tokenizer's special ids: an attacker types text, so reserved tokens
    /// are out of reach.
    pub allowed_tokens: Vec<u32>,
    /// Residual-stream index whose end-of-input activation the loss reads.
    pub layer_index: usize,
    /// Stop a restart early after this many consecutive non-improving
    /// iterations. `None` always runs the full iteration budget.
    #[serde(default)]
    pub stall_patience: Option<usize>,
    /// Initial suffix: `Some(t)` starts every restart from `t` repeated
    /// (the usual fixed-token initialization); `None` draws each restart's
    /// starting suffix uniformly from the allowed tokens.
    #[serde(default)]
    pub init_token: Option<u32>,
    /// Token position whose activation the loss reads. `EndOfInput` targets
    /// the prompt's final token; `EndOfEssay` targets the last essay token,
    /// which sits inside the suffix itself and therefore responds directly
    /// to substitutions.
    #[serde(default = "default_anchor")]
    pub anchor: TokenPosition,
    pub seed: u64,
}

impl Default for GcgConfig {
    fn default() -> Self {
        Self {
            suffix_length: 20,
            iterations: 1000,
            top_k: 256,
            candidates_per_step: 512,
            restarts: 10,
            allowed_tokens: Vec::new(),
            layer_index: 1,
            stall_patience: None,
            init_token: None,
            anchor: default_anchor(),
            seed: 0,
        }
    }
}

impl GcgConfig {
    /// Fills `allowed_tokens` with every ASCII-decoding non-special token.
    pub fn with_ascii_tokens<T: Tokenizer + ?Sized>(mut self, tokenizer: &T) -> Self {
        let specials = tokenizer.special_ids();
        self.allowed_tokens = crate::token::token_filter_ascii(tokenizer)
            .into_iter()
            .filter(|id| !specials.contains(id))
            .collect();
        self
    }

    pub fn probe_point(&self) -> ActivationProbePoint {
        ActivationProbePoint {
            layer_index: self.layer_index,
            token_position: TokenPosition::EndOfInput,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuffixCandidate {
    pub token_ids: Vec<u32>,
    pub text: String,
    pub loss: f64,
    pub restart_seed: u64,
    /// Iteration at which the final loss was first reached.
    pub iteration_found: usize,
    /// (iteration, loss) at initialization and at every accepted step.
    pub history: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub original_ids: Vec<u32>,
    pub original_text: String,
    pub kept_positions: Vec<usize>,
    pub removed_positions: Vec<usize>,
    pub pruned_ids: Vec<u32>,
    pub pruned_text: String,
    pub gain_before: f64,
    pub gain_after: f64,
    /// Per-position change in pooled gain when that token is removed.
    pub deltas: Vec<f64>,
}

/// A prompt split at the suffix insertion point, so suffix token slices can
/// be swapped without re-rendering. Relies on a concatenation-stable (byte
/// level) tokenizer: `encode(a + b) = encode(a) + encode(b)`.
#[derive(Debug, Clone)]
pub struct AttackBundle {
    pub prefix_ids: Vec<u32>,
    pub postfix_ids: Vec<u32>,
    pub problem_id: String,
    pub template_id: String,
    pub essay_id: String,
}

impl AttackBundle {
    pub fn prepare<T: Tokenizer + ?Sized>(
        tokenizer: &T,
        template: &PromptTemplate,
        problem: &EssayProblem,
        essay: &EssayRecord,
        examples: &std::collections::BTreeMap<i32, &EssayRecord>,
    ) -> Result<Self, GcgError> {
        let bundle = render_prompt(template, problem, essay, examples, None)?;
        let cut = bundle.essay_span.end;
        let prefix_text = format!("{} ", &bundle.rendered_text[..cut]);
        let postfix_text = &bundle.rendered_text[cut..];
        Ok(Self {
            prefix_ids: tokenizer.encode(&prefix_text).ids,
            postfix_ids: tokenizer.encode(postfix_text).ids,
            problem_id: bundle.problem_id,
            template_id: bundle.template_id,
            essay_id: bundle.essay_id,
        })
    }

    pub fn assemble<T: Tokenizer + ?Sized>(
        &self,
        tokenizer: &T,
        suffix: &[u32],
    ) -> TokenSequence {
        let mut ids =
            Vec::with_capacity(self.prefix_ids.len() + suffix.len() + self.postfix_ids.len());
        ids.extend_from_slice(&self.prefix_ids);
        ids.extend_from_slice(suffix);
        ids.extend_from_slice(&self.postfix_ids);
        let text = tokenizer.decode(&ids);
        TokenSequence { ids, text }
    }

    pub fn suffix_range(&self, suffix_len: usize) -> Range<usize> {
        self.prefix_ids.len()..self.prefix_ids.len() + suffix_len
    }
}

/// `-<activation(point), v>` for a fully assembled prompt.
pub fn representation_loss(
    backend: &dyn WhiteBoxBackend,
    prompt: &TokenSequence,
    point: ActivationProbePoint,
    target: &Array1<f64>,
) -> Result<f64, BackendError> {
    let acts = backend.forward_with_capture(prompt, &[point])?;
    Ok(-acts[&point].dot(target))
}

/// Mean representation loss of a suffix across the attack bundles.
pub fn mean_suffix_loss<T: Tokenizer + ?Sized>(
    backend: &dyn WhiteBoxBackend,
    tokenizer: &T,
    bundles: &[AttackBundle],
    suffix: &[u32],
    point: ActivationProbePoint,
    target: &Array1<f64>,
) -> Result<f64, GcgError> {
    if bundles.is_empty() {
        return Err(GcgError::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for b in bundles {
        let prompt = b.assemble(tokenizer, suffix);
        total += representation_loss(backend, &prompt, point, target)?;
    }
    Ok(total / bundles.len() as f64)
}

/// Per-position candidate lists: for each suffix position, the allowed tokens
/// ordered by ascending mean gradient (most loss-decreasing first), truncated
/// to `top_k`.
fn top_candidates<T: Tokenizer + ?Sized>(
    backend: &dyn WhiteBoxBackend,
    tokenizer: &T,
    bundles: &[AttackBundle],
    suffix: &[u32],
    config: &GcgConfig,
    target: &Array1<f64>,
) -> Result<Vec<Vec<u32>>, GcgError> {
    let point = config.probe_point();
    let loss_spec = crate::backend::LossSpec::NegatedInnerProduct {
        point,
        target: target.clone(),
    };
    let mut mean_grad: Option<ndarray::Array2<f64>> = None;
    for b in bundles {
        let prompt = b.assemble(tokenizer, suffix);
        let g = backend.loss_gradient_at_onehot(&prompt, b.suffix_range(suffix.len()), &loss_spec)?;
        mean_grad = Some(match mean_grad {
            None => g,
            Some(acc) => acc + g,
        });
    }
    let grad = mean_grad.ok_or(GcgError::EmptyTrainingSet)? / bundles.len() as f64;
    let mut lists = Vec::with_capacity(suffix.len());
    for i in 0..suffix.len() {
        let mut scored: Vec<(f64, u32)> = config
            .allowed_tokens
            .iter()
            .map(|&v| (grad[[i, v as usize]], v))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        lists.push(
            scored
                .into_iter()
                .take(config.top_k)
                .map(|(_, v)| v)
                .collect(),
        );
    }
    Ok(lists)
}

/// One GCG step: propose `candidates_per_step` single-token substitutions
/// drawn from the top-k gradient candidates and keep the best true-loss
/// suffix. Returns the (possibly unchanged) suffix and its loss.
pub fn gcg_step<T: Tokenizer + Sync + ?Sized>(
    backend: &dyn WhiteBoxBackend,
    tokenizer: &T,
    bundles: &[AttackBundle],
    suffix: &[u32],
    incumbent_loss: f64,
    target: &Array1<f64>,
    config: &GcgConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(Vec<u32>, f64), GcgError> {
    if config.allowed_tokens.is_empty() {
        return Err(GcgError::EmptyCandidateSet {
            top_k: config.top_k,
        });
    }
    if suffix.is_empty() {
        return Err(GcgError::EmptySuffix);
    }
    let lists = top_candidates(backend, tokenizer, bundles, suffix, config, target)?;
    // Pool of all (position, token) substitutions reachable this step. When
    // the trial budget covers the whole pool the step degenerates to
    // exhaustive search over it; otherwise sample without replacement.
    let mut pool: Vec<(usize, u32)> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&v| (i, v)))
        .filter(|&(i, v)| suffix[i] != v)
        .collect();
    let trials = if pool.len() > config.candidates_per_step {
        pool.shuffle(rng);
        pool.truncate(config.candidates_per_step);
        pool
    } else {
        pool
    };
    let evaluated: Vec<Result<((usize, u32), f64), GcgError>> = trials
        .par_iter()
        .map(|&(i, v)| {
            let mut cand = suffix.to_vec();
            cand[i] = v;
            mean_suffix_loss(backend, tokenizer, bundles, &cand, config.probe_point(), target)
                .map(|l| ((i, v), l))
        })
        .collect();
    let mut best: Option<((usize, u32), f64)> = None;
    for r in evaluated {
        let ((i, v), l) = r?;
        if best.map(|(_, bl)| l < bl).unwrap_or(true) {
            best = Some(((i, v), l));
        }
    }
    match best {
        Some(((i, v), l)) if l < incumbent_loss => {
            let mut out = suffix.to_vec();
            out[i] = v;
            Ok((out, l))
        }
        _ => Ok((suffix.to_vec(), incumbent_loss)),
    }
}

fn run_restart<T: Tokenizer + Sync + ?Sized>(
    backend: &dyn WhiteBoxBackend,
    tokenizer: &T,
    bundles: &[AttackBundle],
    target: &Array1<f64>,
    config: &GcgConfig,
    restart_seed: u64,
) -> Result<SuffixCandidate, GcgError> {
    let mut rng = ChaCha20Rng::seed_from_u64(restart_seed);
    let mut suffix: Vec<u32> = match config.init_token {
        Some(t) => vec![t; config.suffix_length],
        None => (0..config.suffix_length)
            .map(|_| config.allowed_tokens[rng.gen_range(0..config.allowed_tokens.len())])
            .collect(),
    };
    let point = config.probe_point();
    let mut loss = mean_suffix_loss(backend, tokenizer, bundles, &suffix, point, target)?;
    let mut history = vec![(0usize, loss)];
    let mut iteration_found = 0;
    let mut stalled = 0usize;
    for iter in 0..config.iterations {
        let (next, next_loss) = gcg_step(
            backend, tokenizer, bundles, &suffix, loss, target, config, &mut rng,
        )?;
        if next_loss < loss {
            suffix = next;
            loss = next_loss;
            iteration_found = iter + 1;
            history.push((iter + 1, loss));
            stalled = 0;
        } else {
            stalled += 1;
            if config.stall_patience.map(|p| stalled >= p).unwrap_or(false) {
                break;
            }
        }
    }
    Ok(SuffixCandidate {
        text: tokenizer.decode(&suffix),
        token_ids: suffix,
        loss,
        restart_seed,
        iteration_found,
        history,
    })
}

/// Full multi-restart optimization. Returns one candidate per restart,
/// sorted by ascending loss (ties keep restart order).
pub fn optimize_suffix<T: Tokenizer + Sync + ?Sized>(
    backend: &dyn WhiteBoxBackend,
    tokenizer: &T,
    bundles: &[AttackBundle],
    target: &TargetDirection,
    config: &GcgConfig,
) -> Result<Vec<SuffixCandidate>, GcgError> {
    if bundles.is_empty() {
        return Err(GcgError::EmptyTrainingSet);
    }
    if config.allowed_tokens.is_empty() {
        return Err(GcgError::EmptyCandidateSet {
            top_k: config.top_k,
        });
    }
    let v = target.as_array();
    let results: Vec<Result<SuffixCandidate, GcgError>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(config.seed, &["restart", &r.to_string()]);
            run_restart(backend, tokenizer, bundles, &v, config, seed)
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    out.sort_by(|a, b| a.loss.partial_cmp(&b.loss).unwrap());
    Ok(out)
}

/// Lowest-loss `k` candidates, stable order on ties.
pub fn select_top_candidates(candidates: &[SuffixCandidate], k: usize) -> Vec<SuffixCandidate> {
    assert!(k <= candidates.len(), "k exceeds candidate count");
    let mut sorted: Vec<&SuffixCandidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.loss.partial_cmp(&b.loss).unwrap());
    sorted.into_iter().take(k).cloned().collect()
}

/// Removes redundant suffix tokens in a single pass. A token is redundant if
/// removing it improves the pooled score gain or lowers it by no more than
/// `threshold` (in absolute normalized-gain units, so the default 0.01 is one
/// percentage point of the score range; a drop of exactly `threshold` counts
/// as redundant).
pub fn prune_suffix<T: Tokenizer + ?Sized>(
    scoring_backend: &dyn BlackBoxBackend,
    tokenizer: &T,
    suffix: &[u32],
    cells: &[EvalCell<'_>],
    gen: &GenerationConfig,
    seed: u64,
    threshold: f64,
) -> Result<PruneReport, GcgError> {
    if suffix.is_empty() {
        return Err(GcgError::EmptySuffix);
    }
    let gain_of = |ids: &[u32]| -> f64 {
        let text = tokenizer.decode(ids);
        let opt = if text.is_empty() { None } else { Some(text) };
        measure_gain_rows(scoring_backend, cells, opt.as_deref(), gen, seed).pooled_mean()
    };
    let gain_before = gain_of(suffix);
    let mut deltas = Vec::with_capacity(suffix.len());
    let mut removed_positions = Vec::new();
    let mut kept_positions = Vec::new();
    for i in 0..suffix.len() {
        let mut without: Vec<u32> = suffix.to_vec();
        without.remove(i);
        let delta = gain_of(&without) - gain_before;
        if delta >= -threshold {
            removed_positions.push(i);
        } else {
            kept_positions.push(i);
        }
        deltas.push(delta);
    }
    let pruned_ids: Vec<u32> = kept_positions.iter().map(|&i| suffix[i]).collect();
    let gain_after = gain_of(&pruned_ids);
    Ok(PruneReport {
        original_ids: suffix.to_vec(),
        original_text: tokenizer.decode(suffix),
        kept_positions,
        removed_positions,
        pruned_ids: pruned_ids.clone(),
        pruned_text: tokenizer.decode(&pruned_ids),
        gain_before,
        gain_after,
        deltas,
    })
}
