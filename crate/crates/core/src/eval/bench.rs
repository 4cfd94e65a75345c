//! Per-sample latency and throughput of the three embedding paths.
//!
//! Timing covers prefix encoding, the reasoning portion and embedding
//! extraction. Sample generation and prefix assembly happen before the clock
//! starts. The benchmark is strictly single-threaded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::MultimodalSequence;
use crate::data::curriculum::query_prefix;
use crate::data::generate::generate_example;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rollout::{embed_prefix, explicit_cot_embed};
use crate::seeds::{self, Stream};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// `K` latent steps, then `<elt> <gen>`.
    Latent,
    /// Greedy rationale decoding between `<elt>` and `<gen>`.
    Explicit,
    /// No reasoning: `<elt> <gen>` straight after the prefix.
    SinglePass,
}

impl std::str::FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "explicit" => Ok(Self::Explicit),
            "single_pass" | "single-pass" => Ok(Self::SinglePass),
            other => Err(Error::InvalidArgument(format!("unknown bench mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchProtocol {
    pub samples_per_modality: usize,
    pub warmups: usize,
    pub runs: usize,
    /// Rationale length of the explicit path.
    pub explicit_tokens: usize,
    /// Decode exactly `explicit_tokens` tokens instead of stopping at the
    /// answer terminator.
    pub explicit_forced: bool,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self { samples_per_modality: 500, warmups: 20, runs: 5, explicit_tokens: 403, explicit_forced: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub samples: usize,
    pub mean_latency_ms: f64,
    pub throughput: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: BenchMode,
    pub protocol: BenchProtocol,
    pub runs: Vec<RunTiming>,
    pub mean_latency_ms: f64,
    pub std_latency_ms: f64,
    pub mean_throughput: f64,
    pub std_throughput: f64,
    /// Reasoning forward passes per sample (latent steps or decoded tokens).
    pub reasoning_steps_per_sample: f64,
    pub reasoning_steps_total: u64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Benchmark inputs of one evaluation set: `samples_per_modality` queries per modality.
pub fn bench_inputs(seed: u64, run: usize, per_modality: usize, model: &Model) -> Result<Vec<MultimodalSequence>> {
    let vocab = Vocab::standard();
    let base = seeds::stream_seed(seed, Stream::Bench, &[run as u64]);
    let mut out = Vec::with_capacity(per_modality * Modality::ALL.len());
    for (mi, m) in Modality::ALL.iter().enumerate() {
        for i in 0..per_modality {
            let ex = generate_example(base, mi * per_modality + i, *m);
            out.push(query_prefix(&ex, &vocab, model.backbone.config.anchor_placement)?);
        }
    }
    Ok(out)
}

/// Runs one sample through `mode`; returns its reasoning forward-pass count.
pub fn run_sample(
    model: &Model,
    store: &ParamStore<f32>,
    mode: BenchMode,
    protocol: &BenchProtocol,
    prefix: &MultimodalSequence,
) -> Result<usize> {
    let mut tape = Tape::new(store);
    match mode {
        BenchMode::Latent => {
            let k = model.latent_steps();
            let (emb, trace) = embed_prefix(&mut tape, model, prefix, k)?;
            std::hint::black_box(tape.value(emb.e_gen));
            Ok(trace.latent_states.len())
        }
        BenchMode::SinglePass => {
            let (emb, _) = embed_prefix(&mut tape, model, prefix, 0)?;
            std::hint::black_box(tape.value(emb.e_gen));
            Ok(0)
        }
        BenchMode::Explicit => {
            let mut p = model.backbone.encode_prefix(&mut tape, prefix)?;
            let stop = (!protocol.explicit_forced).then(|| Vocab::standard().eoa_id());
            let out = explicit_cot_embed(&mut tape, &model.backbone, &mut p, protocol.explicit_tokens, stop)?;
            std::hint::black_box(tape.value(out.e_gen));
            Ok(out.tokens_generated)
        }
    }
}

pub fn efficiency_benchmark(
    model: &Model,
    store: &ParamStore<f32>,
    mode: BenchMode,
    protocol: &BenchProtocol,
    seed: u64,
) -> Result<LatencyReport> {
    if protocol.runs == 0 || protocol.samples_per_modality == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one run and one sample".into()));
    }
    if mode == BenchMode::Latent && model.latent_steps() == 0 {
        return Err(Error::ModeMismatch("latent benchmark on a checkpoint without latent steps".into()));
    }
    if mode == BenchMode::Explicit && protocol.explicit_tokens == 0 {
        return Err(Error::InvalidArgument("explicit benchmark needs a positive rationale length".into()));
    }
    let mut runs = Vec::with_capacity(protocol.runs);
    let mut total_steps = 0u64;
    let mut total_samples = 0usize;
    for run in 0..protocol.runs {
        let inputs = bench_inputs(seed, run, protocol.samples_per_modality, model)?;
        for i in 0..protocol.warmups {
            run_sample(model, store, mode, protocol, &inputs[i % inputs.len()])?;
        }
        let start = Instant::now();
        for p in &inputs {
            total_steps += run_sample(model, store, mode, protocol, p)? as u64;
        }
        let secs = start.elapsed().as_secs_f64();
        total_samples += inputs.len();
        runs.push(RunTiming {
            samples: inputs.len(),
            mean_latency_ms: secs * 1e3 / inputs.len() as f64,
            throughput: inputs.len() as f64 / secs.max(1e-12),
        });
    }
    let (mean_latency_ms, std_latency_ms) = mean_std(&runs.iter().map(|r| r.mean_latency_ms).collect::<Vec<_>>());
    let (mean_throughput, std_throughput) = mean_std(&runs.iter().map(|r| r.throughput).collect::<Vec<_>>());
    Ok(LatencyReport {
        mode,
        protocol: protocol.clone(),
        runs,
        mean_latency_ms,
        std_latency_ms,
        mean_throughput,
        std_throughput,
        reasoning_steps_per_sample: total_steps as f64 / total_samples as f64,
        reasoning_steps_total: total_steps,
    })
}
