//! Routing and latent-trajectory diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::RoutingRecord;
use crate::autodiff::Tape;
use crate::data::curriculum::{query_prefix, target_prefix};
use crate::data::{CurriculumExample, Modality};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::Model;
use crate::params::ParamStore;
use crate::rollout::{embed_prefix, rollout};
use crate::vocab::Vocab;

/// Per modality, how often each specialized expert is selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub modalities: Vec<Modality>,
    pub expert_count: usize,
    pub top_k: usize,
    /// Selection counts, modality x expert.
    pub counts: Vec<Vec<u64>>,
    /// Routed latent steps observed per modality.
    pub steps: Vec<u64>,
    /// `counts / steps`.
    pub rates: Vec<Vec<f64>>,
}

impl ActivationProfile {
    /// Each step selects exactly `top_k` experts, so every row's counts sum
    /// to `top_k * steps` and every rate lies in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.modalities.iter().enumerate() {
            let total: u64 = self.counts[i].iter().sum();
            if total != self.top_k as u64 * self.steps[i] {
                return Err(Error::Schema(format!(
                    "{m}: {total} selections over {} steps with top_k {}",
                    self.steps[i], self.top_k
                )));
            }
            if self.rates[i].iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::Schema(format!("{m}: activation rate outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rates[i].iter().sum()
    }
}

/// Routing records of one query's inference rollout.
pub fn routing_records(model: &Model, store: &ParamStore<f32>, ex: &CurriculumExample, steps: usize, vocab: &Vocab) -> Result<Vec<RoutingRecord>> {
    let prefix = query_prefix(ex, vocab, model.backbone.config.anchor_placement)?;
    let mut tape = Tape::new(store);
    let mut p = model.backbone.encode_prefix(&mut tape, &prefix)?;
    Ok(rollout(&mut tape, model, &mut p, steps, None)?.routing)
}

fn require_routed(model: &Model) -> Result<()> {
    if !model.wiring.is_routed() || model.latent_steps() == 0 {
        return Err(Error::ModeMismatch("activation profiling needs a routed adapter with latent steps".into()));
    }
    Ok(())
}

pub fn expert_activation_profile(model: &Model, store: &ParamStore<f32>, examples: &[CurriculumExample]) -> Result<ActivationProfile> {
    require_routed(model)?;
    let vocab = Vocab::standard();
    let k = model.latent_steps();
    let experts = model.adapter.as_ref().map_or(0, |a| a.expert_count());
    let records: Vec<Vec<RoutingRecord>> = examples
        .par_iter()
        .map(|ex| routing_records(model, store, ex, k, &vocab))
        .collect::<Result<_>>()?;
    let present: Vec<Modality> = Modality::ALL.iter().copied().filter(|m| examples.iter().any(|e| e.modality == *m)).collect();
    let mut counts = vec![vec![0u64; experts]; present.len()];
    let mut steps = vec![0u64; present.len()];
    for (ex, recs) in examples.iter().zip(&records) {
        let row = present.iter().position(|m| *m == ex.modality).expect("modality present");
        for r in recs {
            steps[row] += 1;
            for &e in &r.selected {
                counts[row][e] += 1;
            }
        }
    }
    let rates = counts
        .iter()
        .zip(&steps)
        .map(|(c, &s)| c.iter().map(|&x| if s == 0 { 0.0 } else { x as f64 / s as f64 }).collect())
        .collect();
    let profile = ActivationProfile { modalities: present, expert_count: experts, top_k: model.wiring.top_k, counts, steps, rates };
    profile.validate()?;
    Ok(profile)
}

/// Mean routing distribution over every latent step of every example, and
/// its mean absolute deviation from uniform.
pub fn routing_balance(model: &Model, store: &ParamStore<f32>, examples: &[CurriculumExample]) -> Result<(Vec<f64>, f64)> {
    require_routed(model)?;
    let vocab = Vocab::standard();
    let k = model.latent_steps();
    let records: Vec<Vec<RoutingRecord>> = examples
        .par_iter()
        .map(|ex| routing_records(model, store, ex, k, &vocab))
        .collect::<Result<_>>()?;
    let all: Vec<&RoutingRecord> = records.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("no routing records".into()));
    }
    let m = all[0].weights.len();
    let mut mean = vec![0.0; m];
    for r in &all {
        mean.iter_mut().zip(&r.weights).for_each(|(a, w)| *a += w / all.len() as f64);
    }
    let dev = mean.iter().map(|p| (p - 1.0 / m as f64).abs()).sum::<f64>() / m as f64;
    Ok((mean, dev))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    /// A modality name or `all`.
    pub group: String,
    /// Latent step `k` (1-based).
    pub step: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub sample_count: usize,
    pub latent_steps: usize,
    pub rows: Vec<TrajectoryRow>,
}

/// Cosine of each L2-normalized `z(k)` of the query with the positive
/// target's `e_gen`, for one example.
pub fn trajectory_of(model: &Model, store: &ParamStore<f32>, ex: &CurriculumExample, vocab: &Vocab) -> Result<Vec<f64>> {
    let k = model.latent_steps();
    let placement = model.backbone.config.anchor_placement;
    let mut tape = Tape::new(store);
    let (target, _) = embed_prefix(&mut tape, model, &target_prefix(&ex.target, vocab, placement)?, k)?;
    let t: Vec<f64> = tape.value(target.e_gen).iter().map(|v| *v as f64).collect();
    let mut p = model.backbone.encode_prefix(&mut tape, &query_prefix(ex, vocab, placement)?)?;
    let trace = rollout(&mut tape, model, &mut p, k, None)?;
    trace
        .latent_states
        .iter()
        .map(|z| {
            let z: Vec<f64> = tape.value(*z).iter().map(|v| *v as f64).collect();
            let zn = kernels::normalize(&z)?;
            Ok(kernels::dot(&zn, &t).clamp(-1.0, 1.0))
        })
        .collect()
}

fn aggregate(group: &str, curves: &[&Vec<f64>], k: usize) -> Vec<TrajectoryRow> {
    (0..k)
        .map(|s| {
            let xs: Vec<f64> = curves.iter().map(|c| c[s]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            TrajectoryRow { group: group.to_string(), step: s + 1, mean, std, count: xs.len() }
        })
        .collect()
}

/// Per-step mean and population standard deviation over the first
/// `sample_count` examples, overall and per modality.
pub fn trajectory_similarity(
    model: &Model,
    store: &ParamStore<f32>,
    examples: &[CurriculumExample],
    sample_count: usize,
) -> Result<TrajectoryReport> {
    let k = model.latent_steps();
    if k == 0 {
        return Err(Error::ModeMismatch("trajectory diagnostics need latent steps".into()));
    }
    let chosen = &examples[..sample_count.min(examples.len())];
    if chosen.is_empty() {
        return Err(Error::InvalidArgument("no samples for trajectory diagnostics".into()));
    }
    let vocab = Vocab::standard();
    let curves: Vec<Vec<f64>> = chosen.par_iter().map(|ex| trajectory_of(model, store, ex, &vocab)).collect::<Result<_>>()?;
    let mut rows = aggregate("all", &curves.iter().collect::<Vec<_>>(), k);
    for m in Modality::ALL {
        let sel: Vec<&Vec<f64>> = chosen.iter().zip(&curves).filter(|(e, _)| e.modality == m).map(|(_, c)| c).collect();
        if !sel.is_empty() {
            rows.extend(aggregate(m.name(), &sel, k));
        }
    }
    Ok(TrajectoryReport { sample_count: chosen.len(), latent_steps: k, rows })
}
