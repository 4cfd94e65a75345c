//! Command implementations shared by the binary and the integration tests.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, stage_dir, step_dir, Checkpoint};
use super::config::RunConfig;
use crate::data::io::{atomic_write, read_dataset, write_dataset, DatasetHeader};
use crate::data::{generate_dataset, CurriculumExample};
use crate::error::{Error, Result};
use crate::eval::charts::{activation_csv, activation_svg, parse_activation_csv, parse_trajectory_csv, trajectory_csv, trajectory_svg};
use crate::eval::metrics::{hits, ndcg_at_k, rank};
use crate::eval::retrieval::{build_retrieval_set, embed_all};
use crate::eval::{efficiency_benchmark, expert_activation_profile, trajectory_similarity, BenchMode, BenchProtocol, LatencyReport, RetrievalPool};
use crate::model::Model;
use crate::params::ParamStore;
use crate::train::{apply_ablation, build_model, TrainEvent, TrainState, Trainer, ValidationRecord};
use crate::vocab::Vocab;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Writes the resolved config as `<dir>/config.toml`.
pub fn write_resolved_config(dir: &Path, config: &RunConfig) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    atomic_write(&path, config.to_toml()?.as_bytes())?;
    Ok(path)
}

/// Generates the configured dataset into `out`, with the config beside it.
pub fn generate_data(config: &RunConfig, out: &Path) -> Result<DatasetHeader> {
    config.validate()?;
    let seed = config.data_seed();
    let examples = generate_dataset(&config.data.task_mix, config.data.count, seed)?;
    let header = DatasetHeader::new(config.data.count, seed, config.data.task_mix.clone());
    write_dataset(out, &header, &examples)?;
    let side = out.with_extension("config.toml");
    atomic_write(&side, config.to_toml()?.as_bytes())?;
    Ok(header)
}

pub fn default_dataset_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("dataset.jsonl")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub stage_ends: Vec<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub final_validation: Option<ValidationRecord>,
}

fn metrics_line<T: Serialize>(kind: &str, record: &T) -> Result<String> {
    let mut v = serde_json::to_value(record)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("kind".into(), serde_json::Value::String(kind.into()));
    }
    Ok(serde_json::to_string(&v)? + "\n")
}

/// Runs the stage plan, writing `metrics.jsonl`, per-stage checkpoints and
/// the resolved config under the output directory. `resume` continues from
/// a checkpoint of the same configuration.
pub fn train(config: &RunConfig, dataset: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let (header, data) = read_dataset(dataset)?;
    if header.count != data.len() {
        return Err(Error::Schema("dataset header count disagrees with its records".into()));
    }
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    write_resolved_config(out, config)?;
    let (trainer, fresh) = Trainer::new(config.model.clone(), config.adapter.clone(), config.loss.clone(), config.train.clone())?;
    let mut state = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            ck.check_config(config)?;
            ck.restore_state(fresh)?
        }
        None => fresh,
    };
    let (train_set, val_set) = trainer.split(&data)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut replay = String::new();
    for r in &state.history {
        replay.push_str(&metrics_line("step", r)?);
    }
    for v in &state.validation {
        replay.push_str(&metrics_line("validation", v)?);
    }
    atomic_write(&metrics_path, replay.as_bytes())?;
    let mut metrics = OpenOptions::new().append(true).open(&metrics_path)?;

    let mut checkpoints = Vec::new();
    let mut observer = |event: &TrainEvent<'_>, state: &TrainState| -> Result<()> {
        match event {
            TrainEvent::Step(r) => metrics.write_all(metrics_line("step", *r)?.as_bytes())?,
            TrainEvent::Validation(v) => metrics.write_all(metrics_line("validation", *v)?.as_bytes())?,
            TrainEvent::StageComplete { stage } => {
                let dir = stage_dir(out, *stage);
                save_checkpoint(&dir, config, state, *stage, true)?;
                checkpoints.push(dir);
            }
            TrainEvent::Periodic { stage } => {
                let dir = step_dir(out, state.step);
                save_checkpoint(&dir, config, state, *stage, false)?;
                checkpoints.push(dir);
            }
            TrainEvent::Diverged { message } => {
                let dir = out.join("checkpoints").join("diverged");
                let stage = state.history.last().map_or(0, |r| r.stage);
                save_checkpoint(&dir, config, state, stage, false)?;
                metrics.write_all(metrics_line("diverged", &serde_json::json!({ "message": message, "step": state.step }))?.as_bytes())?;
            }
        }
        Ok(())
    };
    let schedule = trainer.run(&mut state, train_set, val_set, &mut observer)?;
    let summary = TrainSummary {
        steps: state.step,
        stage_ends: schedule.stage_ends,
        checkpoints,
        final_validation: state.validation.last().cloned(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// A checkpointed model ready for inference.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub checkpoint: Checkpoint,
}

/// Loads a checkpoint. With `config` given, its hash must match the one the
/// checkpoint was written with.
pub fn load_model(dir: &Path, config: Option<&RunConfig>) -> Result<LoadedModel> {
    let checkpoint = load_checkpoint(dir)?;
    if let Some(c) = config {
        checkpoint.check_config(c)?;
    }
    let config = checkpoint.config.clone();
    let wiring = apply_ablation(&config.train.ablation, &config.adapter, config.train.stages)?;
    let (model, mut store) = build_model(&config.model, &config.adapter, &wiring, config.train.seed)?;
    checkpoint.restore_params(&mut store)?;
    Ok(LoadedModel { config, model, store, checkpoint })
}

pub const METRIC_HIT: &str = "hit@1";
pub const METRIC_NDCG: &str = "ndcg@5";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub config_hash: String,
    pub latent_steps: usize,
    pub query_count: usize,
    pub candidate_count: usize,
    /// Metric name -> group (`all` or a modality) -> value.
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Held-out examples of a dataset under `config`.
pub fn validation_split(config: &RunConfig, data: &[CurriculumExample]) -> Result<Vec<CurriculumExample>> {
    let v = config.train.validation_count;
    if v == 0 || v > data.len() {
        return Err(Error::Config(format!("cannot take {v} validation examples from {}", data.len())));
    }
    Ok(data[data.len() - v..].to_vec())
}

/// Scores a model on `examples` for the requested metrics.
pub fn eval_examples(loaded: &LoadedModel, examples: &[CurriculumExample], metrics: &[String]) -> Result<EvalReport> {
    for m in metrics {
        if m != METRIC_HIT && m != METRIC_NDCG {
            return Err(Error::InvalidArgument(format!("unknown metric {m}; expected {METRIC_HIT} or {METRIC_NDCG}")));
        }
    }
    if metrics.is_empty() {
        return Err(Error::InvalidArgument("no metrics requested".into()));
    }
    let vocab = Vocab::standard();
    let steps = loaded.model.latent_steps();
    let set = build_retrieval_set(examples, &vocab, loaded.config.model.anchor_placement)?;
    let queries = embed_all(&loaded.model, &loaded.store, &set.queries, steps)?;
    let candidates = embed_all(&loaded.model, &loaded.store, &set.candidates, steps)?;
    let pool = RetrievalPool { candidates, gold: set.gold, modalities: set.modalities, relevance: set.relevance };
    let mut out = BTreeMap::new();
    if metrics.iter().any(|m| m == METRIC_HIT) {
        let h = hits(&queries, &pool)?;
        let mut groups: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for (hit, m) in h.iter().zip(&pool.modalities) {
            for g in ["all", m.name()] {
                let e = groups.entry(g.to_string()).or_default();
                e.0 += *hit as u8 as f64;
                e.1 += 1.0;
            }
        }
        out.insert(METRIC_HIT.to_string(), groups.into_iter().map(|(k, (a, n))| (k, a / n)).collect());
    }
    if metrics.iter().any(|m| m == METRIC_NDCG) {
        let doc: Vec<usize> = (0..queries.len()).filter(|&q| pool.modalities[q] == crate::data::Modality::Doc).collect();
        let mut scores = BTreeMap::new();
        if !doc.is_empty() {
            let mut total = 0.0;
            for &q in &doc {
                total += ndcg_at_k(&rank(&queries[q], &pool.candidates), &pool.relevance_of(q), 5)?;
            }
            scores.insert("doc".to_string(), total / doc.len() as f64);
        }
        out.insert(METRIC_NDCG.to_string(), scores);
    }
    Ok(EvalReport {
        checkpoint: PathBuf::new(),
        config_hash: loaded.checkpoint.manifest.config_hash.clone(),
        latent_steps: steps,
        query_count: queries.len(),
        candidate_count: pool.candidates.len(),
        metrics: out,
    })
}

/// Evaluates a checkpoint on the validation split of `dataset` and writes
/// the report to `out`.
pub fn eval(checkpoint: &Path, config: Option<&RunConfig>, dataset: &Path, metrics: &[String], out: &Path) -> Result<EvalReport> {
    let loaded = load_model(checkpoint, config)?;
    let (_, data) = read_dataset(dataset)?;
    let examples = validation_split(&loaded.config, &data)?;
    let mut report = eval_examples(&loaded, &examples, metrics)?;
    report.checkpoint = checkpoint.to_path_buf();
    write_json(out, &report)?;
    Ok(report)
}

/// Benchmarks a checkpoint. `protocol` defaults to the checkpoint config's.
pub fn bench(checkpoint: &Path, config: Option<&RunConfig>, mode: BenchMode, protocol: Option<&BenchProtocol>, out: &Path) -> Result<LatencyReport> {
    let loaded = load_model(checkpoint, config)?;
    let protocol = protocol.unwrap_or(&loaded.config.bench);
    let report = efficiency_benchmark(&loaded.model, &loaded.store, mode, protocol, loaded.config.train.seed)?;
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    Activation,
    Trajectory,
}

impl std::str::FromStr for Diagnostic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(Self::Activation),
            "trajectory" => Ok(Self::Trajectory),
            other => Err(Error::InvalidArgument(format!("unknown diagnostic {other}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOutcome {
    pub written: Vec<PathBuf>,
    /// Diagnostics that do not apply to this checkpoint, with the reason.
    pub refused: Vec<(Diagnostic, String)>,
}

/// Writes the requested diagnostic tables (CSV and JSON) and charts into
/// `out_dir`. Inapplicable diagnostics are refused without stopping the rest.
pub fn diagnose(checkpoint: &Path, config: Option<&RunConfig>, dataset: &Path, which: &[Diagnostic], out_dir: &Path) -> Result<DiagnoseOutcome> {
    let loaded = load_model(checkpoint, config)?;
    let (_, data) = read_dataset(dataset)?;
    let examples = validation_split(&loaded.config, &data)?;
    fs::create_dir_all(out_dir)?;
    let mut outcome = DiagnoseOutcome::default();
    for d in which {
        match d {
            Diagnostic::Activation => {
                let n = loaded.config.diagnose.profile_samples.min(examples.len());
                match expert_activation_profile(&loaded.model, &loaded.store, &examples[..n]) {
                    Ok(p) => {
                        let csv = activation_csv(&p);
                        let paths = [out_dir.join("activation.json"), out_dir.join("activation.csv"), out_dir.join("activation.svg")];
                        write_json(&paths[0], &p)?;
                        atomic_write(&paths[1], csv.as_bytes())?;
                        atomic_write(&paths[2], activation_svg(&parse_activation_csv(&csv)?).as_bytes())?;
                        outcome.written.extend(paths);
                    }
                    Err(Error::ModeMismatch(m)) => outcome.refused.push((*d, m)),
                    Err(e) => return Err(e),
                }
            }
            Diagnostic::Trajectory => {
                match trajectory_similarity(&loaded.model, &loaded.store, &examples, loaded.config.diagnose.trajectory_samples) {
                    Ok(r) => {
                        let csv = trajectory_csv(&r);
                        let paths = [out_dir.join("trajectory.json"), out_dir.join("trajectory.csv"), out_dir.join("trajectory.svg")];
                        write_json(&paths[0], &r)?;
                        atomic_write(&paths[1], csv.as_bytes())?;
                        atomic_write(&paths[2], trajectory_svg(&parse_trajectory_csv(&csv)?).as_bytes())?;
                        outcome.written.extend(paths);
                    }
                    Err(Error::ModeMismatch(m)) => outcome.refused.push((*d, m)),
                    Err(e) => return Err(e),
                }
            }
        }
    }
    write_json(&out_dir.join("diagnose.json"), &outcome)?;
    Ok(outcome)
}

/// Re-renders charts from whichever tables exist in `dir`.
pub fn plot(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let act = dir.join("activation.csv");
    if act.exists() {
        let p = dir.join("activation.svg");
        atomic_write(&p, activation_svg(&parse_activation_csv(&fs::read_to_string(&act)?)?).as_bytes())?;
        written.push(p);
    }
    let traj = dir.join("trajectory.csv");
    if traj.exists() {
        let p = dir.join("trajectory.svg");
        atomic_write(&p, trajectory_svg(&parse_trajectory_csv(&fs::read_to_string(&traj)?)?).as_bytes())?;
        written.push(p);
    }
    if written.is_empty() {
        return Err(Error::InvalidArgument(format!("no activation.csv or trajectory.csv in {}", dir.display())));
    }
    Ok(written)
}
