//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 bad configuration or arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_synthetic_corpus, load_manifest, CorpusError, SynthSpec};
use crate::evaluator::{evaluate_scenes, EvalError, FrozenModel, TestScenes};
use crate::trainer::{
    finetune, latest_checkpoint, pretrain, ConfigError, FinetuneOptions, InitMode, InitScope, TrainConfig,
    TrainError, CONFIG_FILE,
};

/// A run directory stands for its newest checkpoint.
fn resolve_checkpoint(path: PathBuf) -> PathBuf {
    if path.join("meta").is_file() {
        return path;
    }
    latest_checkpoint(&path).unwrap_or(path)
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "hps", version, about = "Hybrid pre-training for person search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Backbone,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        /// TOML file holding a synthetic corpus spec, either at top level
        /// or under `corpus.synth` of a training config.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Hybrid pretraining on the configured source corpora.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run in the given directory (default: --out) from
        /// its newest checkpoint.
        #[arg(long, num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
    },
    /// Supervised fine-tuning on the target corpus.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint or run directory, or `random`.
        #[arg(long)]
        init: String,
        #[arg(long)]
        fraction: f64,
        #[arg(long, value_enum, default_value = "full")]
        init_scope: ScopeArg,
        /// Reuse the checkpoint's prototype table instead of starting a
        /// fresh one; the id spaces must match.
        #[arg(long)]
        keep_oim: bool,
    },
    /// Evaluate a checkpoint on a person-search test manifest.
    Evaluate {
        /// Checkpoint or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Training config (default: the config saved next to the
        /// checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Include per-query rankings in the report.
        #[arg(long)]
        rankings: bool,
    },
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub source_revision: String,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn source_revision() -> String {
    option_env!("HPS_SOURCE_REVISION")
        .map(str::to_string)
        .unwrap_or_else(|| format!("hps-core-{}", env!("CARGO_PKG_VERSION")))
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Write atomically: temp file then rename.
fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| runtime(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| runtime(path, e))
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(RUN_MANIFEST);
        write_atomic(&path, &serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}

fn load_config(path: &Path, seed: u64) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::load(path)?;
    cfg.trainer.seed = seed;
    Ok(cfg)
}

fn load_synth_spec(path: &Path) -> Result<SynthSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if value.contains_key("corpus") {
        TrainConfig::from_toml(&text)?
            .corpus
            .synth
            .ok_or_else(|| CliError::Config(format!("{}: no corpus.synth section", path.display())))
    } else {
        let de = toml::Deserializer::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Config(format!("{}: key `{}`: {}", path.display(), e.path(), e.inner().message())))
    }
}

/// Run one command and return its provenance record (also saved in the
/// command's output directory).
pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    let started = now();
    let (command, config_path, config_hash, seed, artifacts, dir) = match cli.command {
        Command::Synth { spec, out, seed } => {
            let s = load_synth_spec(&spec)?;
            let manifests = generate_synthetic_corpus(&s, seed, &out)?;
            let paths: Vec<PathBuf> = manifests.iter().map(|m| m.path()).collect();
            for p in &paths {
                println!("{}", p.display());
            }
            ("synth", Some(spec), None, Some(seed), paths, out)
        }
        Command::Pretrain {
            config,
            seed,
            out,
            resume,
        } => {
            let cfg = load_config(&config, seed)?;
            let (dir, resume) = match resume {
                Some(Some(dir)) => (dir, true),
                Some(None) => (out, true),
                None => (out, false),
            };
            let run = pretrain(&cfg, &dir, resume)?;
            println!("{}", run.final_checkpoint.display());
            let artifacts = vec![run.final_checkpoint.clone(), dir.join(crate::trainer::LOSS_LOG), dir.join(CONFIG_FILE)];
            ("pretrain", Some(config), Some(run.config_hash), Some(seed), artifacts, dir)
        }
        Command::Finetune {
            config,
            seed,
            out,
            init,
            fraction,
            init_scope,
            keep_oim,
        } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(CliError::Config(format!("--fraction {fraction} outside (0, 1]")));
            }
            let cfg = load_config(&config, seed)?;
            let init = if init == "random" {
                InitMode::Random
            } else {
                InitMode::Checkpoint(resolve_checkpoint(PathBuf::from(init)))
            };
            let scope = match init_scope {
                ScopeArg::Backbone => InitScope::Backbone,
                ScopeArg::Full => InitScope::Full,
            };
            let opts = FinetuneOptions {
                init,
                scope,
                fraction,
                reinit_oim: !keep_oim,
            };
            let run = finetune(&cfg, &opts, &out)?;
            println!("{}", run.final_checkpoint.display());
            let artifacts = vec![run.final_checkpoint.clone(), out.join(crate::trainer::LOSS_LOG), out.join(CONFIG_FILE)];
            ("finetune", Some(config), Some(run.config_hash), Some(seed), artifacts, out)
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            report,
            config,
            rankings,
        } => {
            let checkpoint = resolve_checkpoint(checkpoint);
            let config = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(CONFIG_FILE)
            });
            let cfg = TrainConfig::load(&config)?;
            let frozen = FrozenModel::from_checkpoint(&checkpoint, &cfg.model)?;
            let frozen = match cfg.eval.score_threshold {
                Some(t) => frozen.with_score_threshold(t),
                None => frozen,
            };
            let manifest = load_manifest(&corpus)?;
            let scenes = TestScenes::from_manifest(&manifest, cfg.model.image_size)?;
            let r = evaluate_scenes(&frozen, &scenes, &cfg.eval.top_k, rankings)?;
            write_atomic(&report, &r.to_json())?;
            println!("mAP {:.4}  top-1 {:.4}", r.map, r.top(1));
            let dir = report.parent().unwrap_or(Path::new(".")).to_path_buf();
            ("evaluate", Some(config), Some(cfg.hash()), None, vec![report], dir)
        }
    };
    let manifest = RunManifest {
        command: command.to_string(),
        config_path,
        config_hash,
        seed,
        started_unix: started,
        finished_unix: now(),
        source_revision: source_revision(),
        artifacts,
    };
    manifest.save(&dir)?;
    Ok(manifest)
}
