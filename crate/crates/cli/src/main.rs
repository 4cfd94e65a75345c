use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latent_embed::eval::{BenchMode, BenchProtocol};
use latent_embed::runtime::commands::{self, Diagnostic};
use latent_embed::runtime::{env_threads, RunConfig};

/// Latent-reasoning embedding experiments at desk scale.
#[derive(Parser, Debug)]
#[command(name = "latent-embed", version)]
struct Cli {
    /// Worker threads; defaults to LATENT_EMBED_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset file; defaults to <output_dir>/dataset.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the staged training plan.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset file; defaults to <output_dir>/dataset.jsonl.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        target: CheckpointArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated metrics: hit@1, ndcg@5.
        #[arg(long, value_delimiter = ',', default_value = "hit@1,ndcg@5")]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure inference latency and throughput.
    Bench {
        #[command(flatten)]
        target: CheckpointArgs,
        /// latent, explicit or single_pass.
        #[arg(long, default_value = "latent")]
        mode: BenchMode,
        #[arg(long)]
        samples_per_modality: Option<usize>,
        #[arg(long)]
        warmups: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        explicit_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write routing and trajectory diagnostics with charts.
    Diagnose {
        #[command(flatten)]
        target: CheckpointArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated: activation, trajectory.
        #[arg(long, value_delimiter = ',', default_value = "activation,trajectory")]
        which: Vec<Diagnostic>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-render charts from the CSV tables in a diagnostics directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Configuration sources, applied in order: profile, config file, `--set`,
/// dedicated flags, then the output-directory environment variable unless
/// `--output-dir` is given.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Base preset: desk, smoke or micro.
    #[arg(long)]
    profile: Option<String>,
    /// TOML run configuration layered over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set train.seed=3` or `--set adapter.top_k=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    latent_steps: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Examples to generate, including the validation tail.
    #[arg(long)]
    count: Option<usize>,
    /// Ablation to apply: no_latent, single_mlp, no_anchor_routing,
    /// no_curriculum, no_shared_expert, top1, no_step_embedding.
    #[arg(long = "ablation", value_name = "NAME")]
    ablations: Vec<String>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty key in --set {key}"))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("{p} in {key} is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.profile.is_none() && self.config.is_none() && self.overrides().is_empty()
    }

    fn overrides(&self) -> Vec<(String, toml::Value)> {
        let mut out: Vec<(String, toml::Value)> = Vec::new();
        let mut put = |k: &str, v: toml::Value| out.push((k.to_string(), v));
        if let Some(v) = self.seed {
            put("train.seed", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.epochs {
            put("train.epochs", toml::Value::Float(v));
        }
        if let Some(v) = self.batch_size {
            put("train.batch_size", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.learning_rate {
            put("train.learning_rate", toml::Value::Float(v));
        }
        if let Some(v) = self.stages {
            put("train.stages", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.latent_steps {
            put("model.latent_steps", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.max_steps {
            put("train.max_steps", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.count {
            put("data.count", toml::Value::Integer(v as i64));
        }
        for a in &self.ablations {
            put(&format!("train.ablation.{a}"), toml::Value::Boolean(true));
        }
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let base = RunConfig::profile(self.profile.as_deref().unwrap_or("desk"))?;
        let mut table: toml::Table = toml::from_str(&base.to_toml()?)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let over: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut table, over);
        }
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {s:?}"))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        for (k, v) in self.overrides() {
            set_path(&mut table, &k, v)?;
        }
        let mut config = RunConfig::from_toml(&toml::to_string(&table)?)?.with_env_overrides();
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        Ok(config)
    }

    /// Resolved config for commands where it only serves as a hash check.
    fn resolve_optional(&self) -> Result<Option<RunConfig>> {
        if self.is_empty() {
            Ok(None)
        } else {
            self.resolve().map(Some)
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dataset_or_default(config: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| commands::default_dataset_path(config))
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(0) => bail!("--threads must be positive"),
        Some(n) => Some(n),
        None => env_threads()?,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::GenerateData { config, out } => {
            let config = config.resolve()?;
            let out = dataset_or_default(&config, out);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let header = commands::generate_data(&config, &out)?;
            eprintln!("wrote {} examples to {}", header.count, out.display());
            print_json(&header)
        }
        Command::Train { config, dataset, resume } => {
            let config = config.resolve()?;
            let dataset = dataset_or_default(&config, dataset);
            let summary = commands::train(&config, &dataset, resume.as_deref())?;
            print_json(&summary)
        }
        Command::Eval { target, dataset, metrics, out } => {
            let config = target.config.resolve_optional()?;
            let report = commands::eval(&target.checkpoint, config.as_ref(), &dataset, &metrics, &out)?;
            print_json(&report)
        }
        Command::Bench { target, mode, samples_per_modality, warmups, runs, explicit_tokens, out } => {
            let config = target.config.resolve_optional()?;
            let protocol = bench_protocol(&target.checkpoint, config.as_ref(), samples_per_modality, warmups, runs, explicit_tokens)?;
            let report = commands::bench(&target.checkpoint, config.as_ref(), mode, protocol.as_ref(), &out)?;
            print_json(&report)
        }
        Command::Diagnose { target, dataset, which, out_dir } => {
            let config = target.config.resolve_optional()?;
            let outcome = commands::diagnose(&target.checkpoint, config.as_ref(), &dataset, &which, &out_dir)?;
            for (d, reason) in &outcome.refused {
                eprintln!("refused {d:?}: {reason}");
            }
            print_json(&outcome)
        }
        Command::Plot { dir } => {
            for p in commands::plot(&dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn bench_protocol(
    checkpoint: &Path,
    config: Option<&RunConfig>,
    samples: Option<usize>,
    warmups: Option<usize>,
    runs: Option<usize>,
    tokens: Option<usize>,
) -> Result<Option<BenchProtocol>> {
    if samples.is_none() && warmups.is_none() && runs.is_none() && tokens.is_none() {
        return Ok(None);
    }
    let mut p = match config {
        Some(c) => c.bench.clone(),
        None => latent_embed::runtime::load_checkpoint(checkpoint)?.config.bench,
    };
    p.samples_per_modality = samples.unwrap_or(p.samples_per_modality);
    p.warmups = warmups.unwrap_or(p.warmups);
    p.runs = runs.unwrap_or(p.runs);
    p.explicit_tokens = tokens.unwrap_or(p.explicit_tokens);
    Ok(Some(p))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
