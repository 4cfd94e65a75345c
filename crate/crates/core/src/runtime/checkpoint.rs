//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   format, config hash, stage, step, blob digests
//! <dir>/params.bin      parameters, f32 little-endian, registration order
//! <dir>/optimizer.bin   first then second moments, same layout
//! <dir>/history.json    step and validation records
//! <dir>/config.toml     the resolved run configuration
//! ```
//!
//! Every blob and every parameter carries a SHA-256 digest; any mismatch on
//! load is fatal. Directories are written under a temporary name and renamed
//! into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::train::{AdamW, StepRecord, TrainState, ValidationRecord};

pub const FORMAT: &str = "latent-embed-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) into `params.bin`.
    pub offset: usize,
    pub decay: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub stage: usize,
    /// Whether every step of `stage` had been taken.
    pub stage_complete: bool,
    pub step: usize,
    pub optimizer_step: u64,
    pub blobs: Vec<BlobEntry>,
    pub params: Vec<ParamRecord>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub config: RunConfig,
    pub params: Vec<f32>,
    pub moments: (Vec<f32>, Vec<f32>),
    pub history: History,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Checkpoint("blob length is not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Directory name of the checkpoint written at the end of `stage`.
pub fn stage_dir(run_dir: &Path, stage: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage-{stage}"))
}

/// Directory name of a mid-stage checkpoint.
pub fn step_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step-{step:06}"))
}

pub fn save_checkpoint(dir: &Path, config: &RunConfig, state: &TrainState, stage: usize, stage_complete: bool) -> Result<Manifest> {
    let params = state.store.flatten();
    let param_bytes = f32_bytes(&params);
    let mut moments = state.optimizer.m.clone();
    moments.extend_from_slice(&state.optimizer.v);
    let opt_bytes = f32_bytes(&moments);
    let history = History { steps: state.history.clone(), validation: state.validation.clone() };
    let history_bytes = serde_json::to_vec(&history)?;
    let config_bytes = config.to_toml()?.into_bytes();

    let mut records = Vec::with_capacity(state.store.len());
    let mut offset = 0;
    for e in state.store.entries() {
        let n = e.tensor.len();
        records.push(ParamRecord {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            offset,
            decay: e.decay,
            sha256: digest(&param_bytes[offset * 4..(offset + n) * 4]),
        });
        offset += n;
    }
    let files: [(&str, &[u8]); 4] = [
        ("params.bin", &param_bytes),
        ("optimizer.bin", &opt_bytes),
        ("history.json", &history_bytes),
        ("config.toml", &config_bytes),
    ];
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config_hash: config.hash(),
        stage,
        stage_complete,
        step: state.step,
        optimizer_step: state.optimizer.step,
        blobs: files
            .iter()
            .map(|(f, b)| BlobEntry { file: f.to_string(), bytes: b.len() as u64, sha256: digest(b) })
            .collect(),
        params: records,
    };

    let parent = dir.parent().ok_or_else(|| Error::Checkpoint(format!("{} has no parent", dir.display())))?;
    fs::create_dir_all(parent)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    for (f, b) in files {
        fs::write(tmp.join(f), b)?;
    }
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(manifest)
}

fn read_blob(dir: &Path, manifest: &Manifest, file: &str) -> Result<Vec<u8>> {
    let entry = manifest
        .blobs
        .iter()
        .find(|b| b.file == file)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lists no {file}")))?;
    let bytes = fs::read(dir.join(file))?;
    if bytes.len() as u64 != entry.bytes || digest(&bytes) != entry.sha256 {
        return Err(Error::Checkpoint(format!("integrity digest mismatch in {}", dir.join(file).display())));
    }
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Loads and verifies every digest.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let params = f32_values(&read_blob(dir, &manifest, "params.bin")?)?;
    let moments = f32_values(&read_blob(dir, &manifest, "optimizer.bin")?)?;
    let history: History = serde_json::from_slice(&read_blob(dir, &manifest, "history.json")?)?;
    let config_text = String::from_utf8(read_blob(dir, &manifest, "config.toml")?)
        .map_err(|_| Error::Checkpoint("config.toml is not UTF-8".into()))?;
    let config = RunConfig::from_toml(&config_text)?;
    if config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("stored config does not match the manifest hash".into()));
    }
    if moments.len() != 2 * params.len() {
        return Err(Error::Checkpoint("optimizer state does not match the parameter count".into()));
    }
    for r in &manifest.params {
        let n: usize = r.shape.iter().product();
        let slice = params
            .get(r.offset..r.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} lies outside params.bin", r.name)))?;
        if digest(&f32_bytes(slice)) != r.sha256 {
            return Err(Error::Checkpoint(format!("integrity digest mismatch for parameter {}", r.name)));
        }
    }
    let v = moments[params.len()..].to_vec();
    let mut m = moments;
    m.truncate(params.len());
    Ok(Checkpoint { manifest, config, params, moments: (m, v), history })
}

impl Checkpoint {
    /// Fails unless `config` hashes to the checkpoint's config hash.
    pub fn check_config(&self, config: &RunConfig) -> Result<()> {
        if config.hash() != self.manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match checkpoint hash {}",
                config.hash(),
                self.manifest.config_hash
            )));
        }
        Ok(())
    }

    /// Copies parameters into a store built for the same configuration,
    /// checking names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.manifest.params.len(),
                store.len()
            )));
        }
        for (e, r) in store.entries().iter().zip(&self.manifest.params) {
            if e.name != r.name || e.tensor.shape() != r.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {} {:?} vs {} {:?}", e.name, e.tensor.shape(), r.name, r.shape)));
            }
        }
        store.load_flat(&self.params)
    }

    /// Rebuilds a training state on top of `fresh`, which must come from the
    /// same configuration.
    pub fn restore_state(&self, mut fresh: TrainState) -> Result<TrainState> {
        self.restore_params(&mut fresh.store)?;
        let opt: &mut AdamW = &mut fresh.optimizer;
        opt.m = self.moments.0.clone();
        opt.v = self.moments.1.clone();
        opt.step = self.manifest.optimizer_step;
        fresh.step = self.manifest.step;
        fresh.history = self.history.steps.clone();
        fresh.validation = self.history.validation.clone();
        Ok(fresh)
    }
}
