//! Run configuration: one TOML document fully determines an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::backbone::ModelConfig;
use crate::data::TaskMix;
use crate::error::{Error, Result};
use crate::eval::BenchProtocol;
use crate::seeds::{self, Stream};
use crate::train::{LossWeights, TrainConfig};

/// Overrides the configured output directory.
pub const ENV_OUTPUT_DIR: &str = "LATENT_EMBED_OUTPUT_DIR";
/// Worker threads for batch encoding and evaluation.
pub const ENV_THREADS: &str = "LATENT_EMBED_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Examples generated, including the validation tail.
    pub count: usize,
    /// Generation seed; derived from the training seed when absent.
    pub seed: Option<u64>,
    pub task_mix: TaskMix,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { count: 6000, seed: None, task_mix: TaskMix::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSpec {
    /// Examples used for the trajectory curves.
    pub trajectory_samples: usize,
    /// Examples used for the activation profile.
    pub profile_samples: usize,
}

impl Default for DiagnoseSpec {
    fn default() -> Self {
        Self { trajectory_samples: 200, profile_samples: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataSpec,
    pub bench: BenchProtocol,
    pub diagnose: DiagnoseSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile("desk").expect("desk profile")
    }
}

impl RunConfig {
    /// Named presets. `desk` is the reference scale, `smoke` a micro model
    /// trained for 200 steps, `micro` a seconds-long run for tests.
    pub fn profile(name: &str) -> Result<Self> {
        let base = Self {
            output_dir: PathBuf::from(format!("runs/{name}")),
            model: ModelConfig { hidden_dim: 64, layer_count: 2, ..ModelConfig::default() },
            adapter: AdapterConfig::default(),
            train: TrainConfig { batch_size: 32, learning_rate: 1e-3, epochs: 6.0, validation_count: 300, ..TrainConfig::default() },
            loss: LossWeights::default(),
            data: DataSpec { count: 9900, ..DataSpec::default() },
            bench: BenchProtocol::default(),
            diagnose: DiagnoseSpec::default(),
        };
        let micro_model = ModelConfig { hidden_dim: 16, layer_count: 1, head_count: 2, latent_steps: 2, ..ModelConfig::default() };
        let micro_adapter = AdapterConfig { expert_count: 2, top_k: 1, ..AdapterConfig::default() };
        match name {
            "desk" => Ok(base),
            "smoke" => Ok(Self {
                model: micro_model,
                adapter: micro_adapter,
                train: TrainConfig { batch_size: 8, learning_rate: 1e-3, epochs: 4.0, validation_count: 50, ..TrainConfig::default() },
                data: DataSpec { count: 450, ..DataSpec::default() },
                diagnose: DiagnoseSpec { trajectory_samples: 40, profile_samples: 40 },
                ..base
            }),
            "micro" => Ok(Self {
                model: micro_model,
                adapter: micro_adapter,
                train: TrainConfig { batch_size: 4, learning_rate: 1e-3, epochs: 2.0, validation_count: 8, stages: 2, ..TrainConfig::default() },
                data: DataSpec { count: 40, ..DataSpec::default() },
                bench: BenchProtocol { samples_per_modality: 2, warmups: 1, runs: 2, explicit_tokens: 16, explicit_forced: true },
                diagnose: DiagnoseSpec { trajectory_samples: 8, profile_samples: 8 },
                ..base
            }),
            other => Err(Error::Config(format!("unknown profile {other}; expected desk, smoke or micro"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapter.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.data.task_mix.validate()?;
        if self.data.count <= self.train.validation_count {
            return Err(Error::Config(format!(
                "data.count {} must exceed train.validation_count {}",
                self.data.count, self.train.validation_count
            )));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or_else(|| seeds::stream_seed(self.train.seed, Stream::Data, &[]))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 over the canonical JSON form with the output directory
    /// blanked, so relocating a run keeps its checkpoints compatible.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Applies the output-directory environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        self
    }
}

/// Thread count from the environment, if set to a positive integer.
pub fn env_threads() -> Result<Option<usize>> {
    match std::env::var(ENV_THREADS) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{ENV_THREADS}={v:?} is not a positive integer"))),
        },
    }
}
