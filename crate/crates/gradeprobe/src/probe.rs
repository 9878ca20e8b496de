//! Linear readout probes from residual-stream activations to score logits.
//!
//! A probe is an affine map `f(x) = Wx + b` trained to minimize
//! `sum KL(p || softmax(f(x))) + lambda * ||W||^2` over (activation,
//! empirical score distribution) pairs. The objective is convex in (W, b);
//! training uses full-batch gradient descent with backtracking line search,
//! converging to a documented tolerance of 1e-8 in objective value.
//! Probes are trained independently per (layer, token position, problem,
//! template). The highest-score rows of several probes average into the
//! attack's target direction; rows are averaged raw, without L2
//! normalization, and that choice is recorded in the metadata.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ActivationProbePoint;
use crate::util::pearson;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("activation dimension {got} != probe dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("dataset needs at least 2 examples, got {0}")]
    TooFewExamples(usize),
    #[error("val_fraction must lie in (0, 1), got {0}")]
    BadValFraction(f64),
    #[error("objective did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("degenerate input: zero variance")]
    DegenerateInput,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact format: {0}")]
    Format(String),
}

/// Pairs of activation vectors and empirical score distributions for one
/// (probe point, problem, template) combination.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub probe_point: ActivationProbePoint,
    /// n x N activations.
    pub xs: Array2<f64>,
    /// n x S probability rows (nonnegative, each summing to 1).
    pub ps: Array2<f64>,
    /// The S integer scores, ascending; column j of `ps` is score_values[j].
    pub score_values: Vec<f64>,
    pub problem_id: String,
    pub template_id: String,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub problem_id: String,
    pub template_id: String,
    pub seed: u64,
    pub score_values: Vec<f64>,
    /// Directions are averaged raw (no per-row L2 normalization).
    pub normalized_directions: bool,
}

#[derive(Debug, Clone)]
pub struct ReadoutProbe {
    /// S x N weight matrix.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub lambda: f64,
    pub probe_point: ActivationProbePoint,
    pub meta: ProbeMeta,
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: ReadoutProbe,
    /// Mean per-sample KL on the training split.
    pub train_kl: f64,
    /// Mean per-sample KL on the held-out split.
    pub val_kl: f64,
    /// Objective value at each accepted step; non-increasing.
    pub loss_trace: Vec<f64>,
}

/// The averaged highest-score readout direction the attack amplifies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetDirection {
    pub v: Vec<f64>,
    /// (problem_id, template_id) of each averaged readout row.
    pub sources: Vec<(String, String)>,
}

impl TargetDirection {
    pub fn as_array(&self) -> Array1<f64> {
        Array1::from_vec(self.v.clone())
    }
}

fn softmax_row(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|l| (l - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// `softmax(Wx + b)`; entries positive, summing to 1 within 1e-9.
pub fn predict(probe: &ReadoutProbe, x: &Array1<f64>) -> Result<Array1<f64>, ProbeError> {
    if x.len() != probe.w.ncols() {
        return Err(ProbeError::DimensionMismatch {
            got: x.len(),
            want: probe.w.ncols(),
        });
    }
    let logits = probe.w.dot(x) + &probe.b;
    Ok(softmax_row(&logits))
}

/// Mean score under the probe's predicted distribution.
pub fn predicted_mean_score(probe: &ReadoutProbe, x: &Array1<f64>) -> Result<f64, ProbeError> {
    let q = predict(probe, x)?;
    Ok(q.iter()
        .zip(&probe.meta.score_values)
        .map(|(p, s)| p * s)
        .sum())
}

/// Objective and gradients over a dataset slice: `sum_i KL(p_i || q_i) +
/// lambda ||W||^2`. `0 ln 0` terms are treated as zero.
fn objective(
    w: &Array2<f64>,
    b: &Array1<f64>,
    xs: &Array2<f64>,
    ps: &Array2<f64>,
    lambda: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = xs.nrows();
    let logits = xs.dot(&w.t()); // n x S
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for i in 0..n {
        let row = logits.row(i).to_owned() + b;
        let q = softmax_row(&row);
        for j in 0..q.len() {
            let p = ps[[i, j]];
            if p > 0.0 {
                loss += p * (p.ln() - q[j].ln());
            }
            dlogits[[i, j]] = q[j] - p;
        }
    }
    loss += lambda * w.iter().map(|v| v * v).sum::<f64>();
    let dw = dlogits.t().dot(xs) + &(2.0 * lambda * w);
    let db = dlogits.sum_axis(Axis(0));
    (loss, dw, db)
}

/// Mean per-sample KL of a fitted probe on a dataset slice.
fn mean_kl(w: &Array2<f64>, b: &Array1<f64>, xs: &Array2<f64>, ps: &Array2<f64>) -> f64 {
    if xs.nrows() == 0 {
        return 0.0;
    }
    let (loss, _, _) = objective(w, b, xs, ps, 0.0);
    loss / xs.nrows() as f64
}

const MAX_ITERS: usize = 200;
const OBJ_TOL: f64 = 1e-10;

/// Solves `a x = rhs` for symmetric positive-definite `a` via an in-place
/// Cholesky factorization. Returns `None` when `a` is not positive definite.
fn cholesky_solve(a: &Array2<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    let d = rhs.len();
    let mut l = a.clone();
    for j in 0..d {
        let mut diag = l[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let diag = diag.sqrt();
        l[[j, j]] = diag;
        for i in (j + 1)..d {
            let mut v = l[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / diag;
        }
    }
    // forward solve L y = rhs
    let mut y = rhs.to_vec();
    for i in 0..d {
        for k in 0..i {
            y[i] -= l[[i, k]] * y[k];
        }
        y[i] /= l[[i, i]];
    }
    // back solve L^T x = y
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            y[i] -= l[[k, i]] * y[k];
        }
        y[i] /= l[[i, i]];
    }
    Some(y)
}

/// Minimizes the probe objective with a damped Newton method.
///
/// The objective is convex (softmax cross-entropy plus a ridge term on `W`)
/// but near-separable datasets push the unregularized optimum toward
/// infinite `||W||`, where first-order descent crawls; Newton steps with an
/// Armijo line search converge in a few dozen iterations instead. Parameters
/// are flattened per class as `[W[j, :], b[j]]` so the Hessian is
/// `sum_i kron(diag(q_i) - q_i q_i^T, xt_i xt_i^T)` for augmented inputs
/// `xt = [x, 1]`, plus `2 lambda` on the `W` diagonal. A small damping term
/// handles the softmax gauge direction (shifting all logits equally), which
/// the unregularized bias leaves flat.
fn minimize(
    xs: &Array2<f64>,
    ps: &Array2<f64>,
    lambda: f64,
) -> Result<(Array2<f64>, Array1<f64>, Vec<f64>), ProbeError> {
    let s = ps.ncols();
    let n_dim = xs.ncols();
    let n = xs.nrows();
    let block = n_dim + 1;
    let dim = s * block;
    let mut w: Array2<f64> = Array2::zeros((s, n_dim));
    let mut b: Array1<f64> = Array1::zeros(s);
    let (mut loss, mut dw, mut db) = objective(&w, &b, xs, ps, lambda);
    let mut trace = vec![loss];
    for _ in 0..MAX_ITERS {
        let gnorm = (dw.iter().map(|g| g * g).sum::<f64>()
            + db.iter().map(|g| g * g).sum::<f64>())
        .sqrt();
        if gnorm < 1e-9 * (1.0 + loss.abs()) {
            return Ok((w, b, trace));
        }
        // Assemble the Hessian over flattened parameters.
        let mut h: Array2<f64> = Array2::zeros((dim, dim));
        let mut xt = vec![0.0; block];
        for i in 0..n {
            let logits = w.dot(&xs.row(i)) + &b;
            let q = softmax_row(&logits);
            for k in 0..n_dim {
                xt[k] = xs[[i, k]];
            }
            xt[n_dim] = 1.0;
            for j in 0..s {
                for jp in j..s {
                    let a = if j == jp {
                        q[j] * (1.0 - q[j])
                    } else {
                        -q[j] * q[jp]
                    };
                    if a == 0.0 {
                        continue;
                    }
                    for k in 0..block {
                        let ak = a * xt[k];
                        for kp in 0..block {
                            h[[j * block + k, jp * block + kp]] += ak * xt[kp];
                        }
                    }
                }
            }
        }
        // mirror the upper block triangle and add the ridge curvature
        for j in 0..s {
            for jp in 0..j {
                for k in 0..block {
                    for kp in 0..block {
                        h[[j * block + k, jp * block + kp]] =
                            h[[jp * block + kp, j * block + k]];
                    }
                }
            }
            for k in 0..n_dim {
                h[[j * block + k, j * block + k]] += 2.0 * lambda;
            }
        }
        let mut g = vec![0.0; dim];
        for j in 0..s {
            for k in 0..n_dim {
                g[j * block + k] = dw[[j, k]];
            }
            g[j * block + n_dim] = db[j];
        }
        let scale = (0..dim).map(|i| h[[i, i]]).sum::<f64>() / dim as f64;
        let mut delta = 1e-8 * (1.0 + scale);
        let dir = loop {
            let mut hd = h.clone();
            for i in 0..dim {
                hd[[i, i]] += delta;
            }
            if let Some(d) = cholesky_solve(&hd, &g) {
                break d;
            }
            delta *= 10.0;
            if delta > 1e12 * (1.0 + scale) {
                return Err(ProbeError::NonConvergence(trace.len()));
            }
        };
        let gdot = g.iter().zip(&dir).map(|(gi, di)| gi * di).sum::<f64>();
        if gdot <= 0.0 {
            // numerically flat along the Newton direction
            return Ok((w, b, trace));
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut w_try = w.clone();
            let mut b_try = b.clone();
            for j in 0..s {
                for k in 0..n_dim {
                    w_try[[j, k]] -= step * dir[j * block + k];
                }
                b_try[j] -= step * dir[j * block + n_dim];
            }
            let (l_try, dw_try, db_try) = objective(&w_try, &b_try, xs, ps, lambda);
            if l_try <= loss - 1e-4 * step * gdot {
                let drop = loss - l_try;
                w = w_try;
                b = b_try;
                loss = l_try;
                dw = dw_try;
                db = db_try;
                trace.push(loss);
                accepted = true;
                if drop < OBJ_TOL * (1.0 + loss.abs()) {
                    return Ok((w, b, trace));
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // line search exhausted: no improvement at representable scales
            return Ok((w, b, trace));
        }
    }
    Err(ProbeError::NonConvergence(MAX_ITERS))
}

/// Trains a probe on a seeded train/validation split of `data`.
pub fn train_probe(
    data: &ProbeDataset,
    lambda: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<TrainedProbe, ProbeError> {
    if data.len() < 2 {
        return Err(ProbeError::TooFewExamples(data.len()));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(ProbeError::BadValFraction(val_fraction));
    }
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64) * val_fraction).round().max(1.0) as usize;
    let n_val = n_val.min(n - 1);
    let (val_idx, train_idx) = idx.split_at(n_val);
    let take = |rows: &[usize], a: &Array2<f64>| {
        let mut out = Array2::zeros((rows.len(), a.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).assign(&a.row(i));
        }
        out
    };
    let xs_tr = take(train_idx, &data.xs);
    let ps_tr = take(train_idx, &data.ps);
    let xs_val = take(val_idx, &data.xs);
    let ps_val = take(val_idx, &data.ps);
    let (w, b, trace) = minimize(&xs_tr, &ps_tr, lambda)?;
    let train_kl = mean_kl(&w, &b, &xs_tr, &ps_tr);
    let val_kl = mean_kl(&w, &b, &xs_val, &ps_val);
    Ok(TrainedProbe {
        probe: ReadoutProbe {
            w,
            b,
            lambda,
            probe_point: data.probe_point,
            meta: ProbeMeta {
                problem_id: data.problem_id.clone(),
                template_id: data.template_id.clone(),
                seed,
                score_values: data.score_values.clone(),
                normalized_directions: false,
            },
        },
        train_kl,
        val_kl,
        loss_trace: trace,
    })
}

/// Picks the candidate with the lowest validation KL; ties break toward the
/// larger lambda.
pub fn cross_validate_lambda(
    data: &ProbeDataset,
    candidates: &[f64],
    val_fraction: f64,
    seed: u64,
) -> Result<f64, ProbeError> {
    assert!(candidates.len() >= 1);
    let mut best: Option<(f64, f64)> = None; // (val_kl, lambda)
    for &lambda in candidates {
        let trained = train_probe(data, lambda, val_fraction, seed)?;
        let better = match best {
            None => true,
            Some((kl, best_lambda)) => {
                trained.val_kl < kl || (trained.val_kl == kl && lambda > best_lambda)
            }
        };
        if better {
            best = Some((trained.val_kl, lambda));
        }
    }
    Ok(best.expect("nonempty candidates").1)
}

/// Pearson r between probe-predicted mean score and LLM-graded mean score
/// over a held-out dataset.
pub fn probe_correlation(probe: &ReadoutProbe, heldout: &ProbeDataset) -> Result<f64, ProbeError> {
    if heldout.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    let mut predicted = Vec::with_capacity(heldout.len());
    let mut observed: Vec<f64> = Vec::with_capacity(heldout.len());
    for i in 0..heldout.len() {
        let x = heldout.xs.row(i).to_owned();
        predicted.push(predicted_mean_score(probe, &x)?);
        observed.push(
            heldout
                .ps
                .row(i)
                .iter()
                .zip(&heldout.score_values)
                .map(|(p, s)| p * s)
                .sum(),
        );
    }
    let distinct = {
        let mut o = observed.clone();
        o.sort_by(|a, b| a.partial_cmp(b).unwrap());
        o.dedup();
        o.len()
    };
    if distinct < 2 {
        return Err(ProbeError::DegenerateInput);
    }
    Ok(pearson(&predicted, &observed))
}

/// The readout row for the problem's highest score.
pub fn top_score_direction(probe: &ReadoutProbe) -> Array1<f64> {
    let top = probe
        .meta
        .score_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .expect("nonempty score values");
    probe.w.row(top).to_owned()
}

/// Symmetric matrix of cosine similarities between directions.
pub fn direction_similarity_matrix(directions: &[Array1<f64>]) -> Result<Array2<f64>, ProbeError> {
    let k = directions.len();
    if k == 0 {
        return Err(ProbeError::EmptyInput);
    }
    let norms: Vec<f64> = directions.iter().map(|d| d.dot(d).sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(ProbeError::ZeroVector);
    }
    let mut m = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            m[[i, j]] = directions[i].dot(&directions[j]) / (norms[i] * norms[j]);
        }
    }
    Ok(m)
}

/// Elementwise mean of the directions, with their provenance recorded.
pub fn average_direction(
    directions: &[(Array1<f64>, (String, String))],
) -> Result<TargetDirection, ProbeError> {
    if directions.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    let dim = directions[0].0.len();
    for (d, _) in directions {
        if d.len() != dim {
            return Err(ProbeError::DimensionMismatch {
                got: d.len(),
                want: dim,
            });
        }
    }
    let mut v = Array1::<f64>::zeros(dim);
    for (d, _) in directions {
        v = v + d;
    }
    v /= directions.len() as f64;
    Ok(TargetDirection {
        v: v.to_vec(),
        sources: directions.iter().map(|(_, s)| s.clone()).collect(),
    })
}

const PROBE_MAGIC: &[u8; 4] = b"PRBE";

/// Binary probe artifact: shape header + float32 W and b + metadata block.
pub fn save_probe<W: Write>(probe: &ReadoutProbe, mut out: W) -> Result<(), ProbeError> {
    out.write_all(PROBE_MAGIC)?;
    out.write_u32::<LittleEndian>(1)?;
    out.write_u64::<LittleEndian>(probe.w.nrows() as u64)?;
    out.write_u64::<LittleEndian>(probe.w.ncols() as u64)?;
    for &v in probe.w.iter() {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    for &v in probe.b.iter() {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    out.write_f64::<LittleEndian>(probe.lambda)?;
    let meta = serde_json::to_vec(&(&probe.probe_point, &probe.meta))
        .map_err(|e| ProbeError::Format(e.to_string()))?;
    out.write_u64::<LittleEndian>(meta.len() as u64)?;
    out.write_all(&meta)?;
    Ok(())
}

pub fn load_probe<R: Read>(mut input: R) -> Result<ReadoutProbe, ProbeError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != PROBE_MAGIC {
        return Err(ProbeError::Format("bad magic".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != 1 {
        return Err(ProbeError::Format(format!("unsupported version {version}")));
    }
    let s = input.read_u64::<LittleEndian>()? as usize;
    let n = input.read_u64::<LittleEndian>()? as usize;
    if s.checked_mul(n).map(|t| t > 1 << 28).unwrap_or(true) {
        return Err(ProbeError::Format("implausible shape".into()));
    }
    let mut w = Array2::zeros((s, n));
    for v in w.iter_mut() {
        *v = input.read_f32::<LittleEndian>()? as f64;
    }
    let mut b = Array1::zeros(s);
    for v in b.iter_mut() {
        *v = input.read_f32::<LittleEndian>()? as f64;
    }
    let lambda = input.read_f64::<LittleEndian>()?;
    let meta_len = input.read_u64::<LittleEndian>()? as usize;
    if meta_len > 1 << 24 {
        return Err(ProbeError::Format("implausible metadata length".into()));
    }
    let mut meta_buf = vec![0u8; meta_len];
    input.read_exact(&mut meta_buf)?;
    let (probe_point, meta): (ActivationProbePoint, ProbeMeta) =
        serde_json::from_slice(&meta_buf).map_err(|e| ProbeError::Format(e.to_string()))?;
    Ok(ReadoutProbe {
        w,
        b,
        lambda,
        probe_point,
        meta,
    })
}
