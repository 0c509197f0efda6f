//! Run configuration: one TOML file shared by every subcommand.
//!
//! ```toml
//! version = 1
//! seed = 1
//!
//! [paths]
//! corpus = "run/corpus"
//!
//! [train]
//! epochs = 30
//! ```
//!
//! Every section and key is optional. Command-line flags are applied on top
//! of the file, and the resolved result is embedded in each artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capvae::corpus::CorpusConfig;
use capvae::seqmodel::ModelConfig;
use capvae::training::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
pub const TOOL: &str = concat!("capvae ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub candidates: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "run/corpus".into(),
            checkpoints: "run/checkpoints".into(),
            candidates: "run/candidates".into(),
            reports: "run/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: Variant,
    pub sigma_train: f64,
    pub sigma_fixed: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub halve_every: usize,
    pub kl_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            variant: t.variant,
            sigma_train: t.sigma_train,
            sigma_fixed: t.sigma_fixed,
            lr0: t.lr0,
            epochs: t.epochs,
            halve_every: t.halve_every,
            kl_weight: t.kl_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n_z: usize,
    pub test_std: f64,
    /// Candidates for validation tuning of `test_std`.
    pub std_grid: Vec<f64>,
    pub beam_width: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            n_z: 20,
            test_std: 1.0,
            std_grid: vec![0.1, 1.0, 2.0],
            beam_width: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub m_neighbors: usize,
    pub top_m: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            m_neighbors: 16,
            top_m: 10,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or returns defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            );
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        if self.sample.n_z == 0 || self.sample.beam_width == 0 {
            bail!("n_z and beam_width must be >= 1");
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.sample.test_std) || !self.sample.std_grid.iter().all(|s| positive(*s)) {
            bail!("test_std values must be positive");
        }
        if self.eval.m_neighbors == 0 || self.eval.top_m == 0 {
            bail!("m_neighbors and top_m must be >= 1");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.train.variant,
            model: self.model.clone(),
            sigma_train: self.train.sigma_train,
            sigma_fixed: self.train.sigma_fixed,
            lr0: self.train.lr0,
            epochs: self.train.epochs,
            halve_every: self.train.halve_every,
            kl_weight: self.train.kl_weight,
            seed: self.seed,
        }
    }

    pub fn checkpoint_path(&self, variant: Variant) -> PathBuf {
        self.paths.checkpoints.join(format!("{variant}.ckpt"))
    }

    pub fn metrics_path(&self, variant: Variant) -> PathBuf {
        self.paths.checkpoints.join(format!("{variant}.metrics.jsonl"))
    }

    pub fn candidates_path(&self, variant: Variant) -> PathBuf {
        self.paths.candidates.join(format!("{variant}.jsonl"))
    }

    /// `{tool, config}` record embedded in artifacts.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({ "tool": TOOL, "config": self })
    }
}
