//! Contrastive, suffix cross-entropy and combined objectives.
//!
//! Plain `f64` versions serve as reference implementations; the tape versions
//! are what training differentiates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Real;

/// Additive logit offset that removes a candidate from a softmax.
const MASKED: f64 = -1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_gen: f64,
    pub lambda_anc: f64,
    pub lambda_bal: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_gen: 1.0, lambda_anc: 0.5, lambda_bal: 0.01, temperature: 0.02 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_gen", self.lambda_gen), ("lambda_anc", self.lambda_anc), ("lambda_bal", self.lambda_bal)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} = {w} must be a finite nonnegative number")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Loss components of one step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub nce_gen: f64,
    pub nce_anc: f64,
    pub balance: f64,
}

/// `ce + λ_gen·nce_gen + λ_anc·nce_anc + λ_bal·balance`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("ce", c.ce), ("nce_gen", c.nce_gen), ("nce_anc", c.nce_anc), ("balance", c.balance)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    Ok(c.ce + w.lambda_gen * c.nce_gen + w.lambda_anc * c.nce_anc + w.lambda_bal * c.balance)
}

fn check_pairs(queries: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("InfoNCE over an empty batch".into()));
    }
    if queries.len() != targets.len() {
        return Err(Error::Shape(format!("{} queries but {} targets", queries.len(), targets.len())));
    }
    for v in queries.iter().chain(targets) {
        let n = kernels::l2_norm(v);
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument(format!("InfoNCE input has norm {n}, expected unit vectors")));
        }
    }
    Ok(())
}

/// Mean over rows of `-log softmax(row)[i]` where entries with `mask[i][j]`
/// set (never the diagonal) are left out of the denominator.
fn diagonal_ce(sim: &[Vec<f64>], tau: f64, mask: Option<&[Vec<bool>]>) -> f64 {
    let n = sim.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .filter(|&j| j == i || !mask.is_some_and(|m| m[i][j]))
            .map(|j| sim[i][j] / tau)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - sim[i][i] / tau;
    }
    total / n as f64
}

/// Bidirectional InfoNCE from a precomputed similarity matrix: the mean of
/// the query-to-target and target-to-query losses.
pub fn info_nce_from_similarity(sim: &[Vec<f64>], tau: f64) -> Result<f64> {
    if sim.is_empty() || sim.iter().any(|r| r.len() != sim.len()) {
        return Err(Error::Shape("similarity matrix must be square and nonempty".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let n = sim.len();
    let transposed: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| sim[i][j]).collect()).collect();
    Ok(0.5 * (diagonal_ce(sim, tau, None) + diagonal_ce(&transposed, tau, None)))
}

/// Bidirectional InfoNCE with in-batch negatives over unit vectors.
pub fn info_nce(queries: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> Result<f64> {
    info_nce_masked(queries, targets, tau, None)
}

/// [`info_nce`] with optional false-negative masking: `same[i][j]` marks
/// off-diagonal pairs whose targets are interchangeable, which are then
/// dropped from both directions' denominators.
pub fn info_nce_masked(queries: &[Vec<f64>], targets: &[Vec<f64>], tau: f64, same: Option<&[Vec<bool>]>) -> Result<f64> {
    check_pairs(queries, targets)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let n = queries.len();
    let sim: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| targets.iter().map(|t| kernels::dot(q, t)).collect())
        .collect();
    let transposed: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| sim[i][j]).collect()).collect();
    Ok(0.5 * (diagonal_ce(&sim, tau, same) + diagonal_ce(&transposed, tau, same)))
}

/// Differentiable bidirectional InfoNCE over `[N, D]` unit-row inputs.
pub fn info_nce_var<T: Real>(tape: &mut Tape<T>, q: Var, t: Var, tau: f64, same: Option<&[Vec<bool>]>) -> Result<Var> {
    let (n, d) = tape.shape(q);
    if n == 0 {
        return Err(Error::InvalidArgument("InfoNCE over an empty batch".into()));
    }
    if tape.shape(t) != (n, d) {
        return Err(Error::Shape(format!("queries {:?} vs targets {:?}", (n, d), tape.shape(t))));
    }
    let raw = tape.matmul_t(q, t);
    let mut sim = tape.scale(raw, 1.0 / tau);
    if let Some(same) = same {
        let offsets = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| T::of(if i != j && same[i][j] { MASKED } else { 0.0 }))
            .collect();
        let m = tape.leaf(n, n, offsets);
        sim = tape.add(sim, m);
    }
    let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
    let fwd = tape.cross_entropy_sum(sim, &diag);
    let st = tape.transpose(sim);
    let bwd = tape.cross_entropy_sum(st, &diag);
    let both = tape.add(fwd, bwd);
    Ok(tape.scale(both, 0.5 / n as f64))
}

/// Mean token cross-entropy over the masked rows of `logits` (`[n, V]`,
/// row-major). An empty mask yields 0.
pub fn ce_suffix_loss(logits: &[f64], vocab: usize, mask: &[bool], references: &[usize]) -> Result<f64> {
    if vocab == 0 || logits.len() != mask.len() * vocab {
        return Err(Error::Shape(format!("{} logits for {} positions over {vocab} classes", logits.len(), mask.len())));
    }
    if references.len() != mask.len() {
        return Err(Error::Shape(format!("{} references for {} positions", references.len(), mask.len())));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (i, row) in logits.chunks(vocab).enumerate() {
        if !mask[i] {
            continue;
        }
        let r = references[i];
        if r >= vocab {
            return Err(Error::OutOfRange { what: "reference token", index: r, limit: vocab });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[r];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
