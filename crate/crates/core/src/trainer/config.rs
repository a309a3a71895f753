//! Run configuration, loaded from TOML with unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::SynthSpec;
use crate::iam::ProbeConfig;
use crate::model::ModelConfig;
use crate::objectives::HyperParams;
use crate::unification::AugmentConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config key `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnifyMode {
    ExpandResize,
    RandomPaste,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Manifest files; each one's header declares its role.
    pub manifests: Vec<PathBuf>,
    pub unify: UnifyMode,
    /// Uniform range of the expand_resize canvas ratio.
    pub expand_ratio: [f64; 2],
    pub augment: AugmentConfig,
    /// Generator settings used by `hps synth` when pointed at this file.
    pub synth: Option<SynthSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            manifests: Vec::new(),
            unify: UnifyMode::ExpandResize,
            expand_ratio: [1.0, 3.0],
            augment: AugmentConfig::default(),
            synth: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConMode {
    /// Mean of the view's ground-truth embeddings.
    Mean,
    /// One pair per corresponding box.
    PerBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesConfig {
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub enable_con: bool,
    pub con_mode: ConMode,
    /// Feed both augmented views to the supervised loss; otherwise only
    /// the first.
    pub both_views: bool,
}

impl Default for ObjectivesConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            eta: hp.eta,
            lambda: hp.lambda,
            gamma: hp.gamma,
            tau: hp.tau,
            enable_con: true,
            con_mode: ConMode::Mean,
            both_views: true,
        }
    }
}

impl ObjectivesConfig {
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            eta: self.eta,
            lambda: self.lambda,
            gamma: self.gamma,
            tau: self.tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IamConfig {
    pub enabled: bool,
    pub detection: bool,
    pub reid: bool,
    pub alpha: f64,
    /// Linear ramp of alpha from 0 over this many steps; 0 = constant.
    pub warmup_steps: u64,
    pub hidden: usize,
    pub probe: ProbeConfig,
}

impl Default for IamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            detection: true,
            reid: true,
            alpha: 1.0,
            warmup_steps: 0,
            hidden: 32,
            probe: ProbeConfig::default(),
        }
    }
}

impl IamConfig {
    pub fn alpha_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.alpha
        } else {
            self.alpha * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchComposition {
    pub detection: usize,
    pub reid_labeled: usize,
    pub reid_unlabeled: usize,
    pub target: usize,
}

impl BatchComposition {
    pub fn total(&self) -> usize {
        self.detection + self.reid_labeled + self.reid_unlabeled + self.target
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub seed: u64,
    pub steps: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub schedule: Schedule,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub batch: BatchComposition,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: Some(10.0),
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            batch_size: 8,
            batch: BatchComposition {
                detection: 4,
                reid_labeled: 2,
                reid_unlabeled: 2,
                target: 0,
            },
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test manifest of the person-search target.
    pub gallery: Option<PathBuf>,
    /// Overrides the model's detection score threshold when set.
    pub score_threshold: Option<f64>,
    pub top_k: Vec<usize>,
    pub fig5_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub finetune_steps: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gallery: None,
            score_threshold: None,
            top_k: vec![1, 5, 10],
            fig5_fractions: vec![0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2],
            finetune_steps: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub objectives: ObjectivesConfig,
    pub iam: IamConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            key: String::new(),
            message: e.to_string(),
        })?;
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file; relative manifest and gallery paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.corpus.manifests {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        if let Some(g) = &mut cfg.eval.gallery {
            if g.is_relative() {
                *g = base.join(&*g);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.trainer;
        if t.batch.total() != t.batch_size {
            return Err(invalid(
                "trainer.batch",
                format!(
                    "composition sums to {} but batch_size is {}",
                    t.batch.total(),
                    t.batch_size
                ),
            ));
        }
        for (key, v) in [
            ("trainer.learning_rate", t.learning_rate),
            ("trainer.momentum", t.momentum),
            ("trainer.weight_decay", t.weight_decay),
            ("objectives.eta", self.objectives.eta),
            ("objectives.lambda", self.objectives.lambda),
            ("iam.alpha", self.iam.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(key, "must be finite and non-negative"));
            }
        }
        let o = &self.objectives;
        if !(o.gamma > 0.0 && o.gamma < 1.0) {
            return Err(invalid("objectives.gamma", "must lie in (0, 1)"));
        }
        if !(o.tau > 0.0 && o.tau.is_finite()) {
            return Err(invalid("objectives.tau", "must be positive"));
        }
        let [lo, hi] = self.corpus.expand_ratio;
        if !(1.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(invalid(
                "corpus.expand_ratio",
                "needs 1 <= min <= max",
            ));
        }
        let m = &self.model;
        if m.image_size == 0 || m.embed_dim < 4 || m.roi_size == 0 {
            return Err(invalid("model", "image_size, embed_dim and roi_size must be positive"));
        }
        if m.anchor_sizes.is_empty() || m.anchor_ratios.is_empty() {
            return Err(invalid("model.anchor_sizes", "need at least one anchor size and ratio"));
        }
        if m.strides.contains(&0) {
            return Err(invalid("model.strides", "strides must be positive"));
        }
        Ok(())
    }

    /// Settings tuned for the small synthetic desk corpora: 64 px inputs,
    /// a softer OIM temperature, a higher rate with warmup and short runs.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.objectives.tau = 0.1;
        cfg.trainer.learning_rate = 0.03;
        cfg.trainer.warmup_steps = 100;
        cfg.trainer.steps = 800;
        cfg.eval.finetune_steps = 300;
        cfg
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml("[trainer]\nstepz = 3\n").unwrap_err();
        match err {
            ConfigError::Parse { key, message } => {
                assert_eq!(key, "trainer.stepz");
                assert!(message.contains("stepz"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_names_key() {
        let err = TrainConfig::from_toml("[objectives]\neta = \"high\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { ref key, .. } if key == "objectives.eta"), "{err:?}");
    }

    #[test]
    fn composition_must_sum() {
        let err = TrainConfig::from_toml("[trainer]\nbatch_size = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "trainer.batch"));
    }
}
