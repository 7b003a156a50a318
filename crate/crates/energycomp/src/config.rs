//! JSON experiment configuration. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use energycomp_core::energy::DEFAULT_PUE;
use energycomp_core::model::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetFormat, TRAIN_CSV};
use crate::error::{Error, IoContext, Result};
use crate::meter::SamplerSpec;

/// Environment variable consulted when neither the command line nor the
/// config sets a seed.
pub const SEED_ENV: &str = "ENERGYCOMP_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Hidden widths 256 and 128.
    #[default]
    Mlp,
    /// Two 3×3 convolutions (16 and 32 channels) and a dense head.
    Cnn,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Mlp => "mlp",
            Architecture::Cnn => "cnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Baseline,
    Stego,
    Prune,
    Lowrank,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Stego, Method::Prune, Method::Lowrank];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Stego => "stego",
            Method::Prune => "prune",
            Method::Lowrank => "lowrank",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Directory holding the train and test files.
    pub path: PathBuf,
    pub format: DatasetFormat,
}

impl DatasetSpec {
    /// CSV when `dir` holds `train.csv`, IDX otherwise.
    pub fn detect(dir: impl Into<PathBuf>) -> Self {
        let path = dir.into();
        let format = if path.join(TRAIN_CSV).is_file() {
            DatasetFormat::Csv
        } else {
            DatasetFormat::Idx
        };
        Self { path, format }
    }
}

/// Training hyperparameters; the seed lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub patience: usize,
    pub min_delta: f32,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            patience: d.patience,
            min_delta: d.min_delta,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub architecture: Architecture,
    pub dataset: DatasetSpec,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub method: Method,
    /// Largest tolerated accuracy drop, as a fraction.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_pue")]
    pub pue: f64,
    #[serde(default)]
    pub sampler: SamplerSpec,
    /// Seconds between power samples.
    #[serde(default = "default_cadence")]
    pub cadence_s: f64,
    /// Prune rate grid spacing.
    #[serde(default = "default_prune_step")]
    pub prune_step: f64,
    /// Cap on low-rank adjustment rounds.
    #[serde(default = "default_rank_iters")]
    pub max_rank_iters: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Baseline model for compression methods; `<out>/baseline.nncm` when
    /// absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Directory for models, records and reports.
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_class_count() -> usize {
    10
}

fn default_threshold() -> f64 {
    0.01
}

fn default_pue() -> f64 {
    DEFAULT_PUE
}

fn default_cadence() -> f64 {
    1.0
}

fn default_prune_step() -> f64 {
    0.01
}

fn default_rank_iters() -> usize {
    20
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Defaults for everything but the dataset.
    pub fn new(dataset: DatasetSpec) -> Self {
        serde_json::from_value(serde_json::json!({ "dataset": dataset }))
            .expect("a dataset alone is a complete config")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative dataset, model, trace and output paths
    /// are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            rebase(&mut cfg.dataset.path);
            rebase(&mut cfg.out);
            if let Some(m) = cfg.model.as_mut() {
                rebase(m);
            }
            if let SamplerSpec::Trace { path } = &mut cfg.sampler {
                rebase(path);
            }
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked before data is read.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.class_count < 2 {
            return fail(format!("class_count must be at least 2, got {}", self.class_count));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if !(self.pue.is_finite() && self.pue >= 1.0) {
            return fail(format!("pue must be at least 1, got {}", self.pue));
        }
        if !(self.cadence_s.is_finite() && self.cadence_s > 0.0) {
            return fail(format!("cadence_s must be positive, got {}", self.cadence_s));
        }
        if self.method == Method::Prune && !(self.prune_step > 0.0 && self.prune_step < 1.0) {
            return fail(format!("prune_step must lie in (0, 1), got {}", self.prune_step));
        }
        self.train_config(0).validate()?;
        self.sampler.validate()?;
        if self.method != Method::Baseline {
            let path = self.baseline_path();
            if !path.is_file() {
                return fail(format!(
                    "method {} needs a baseline model, but {} does not exist",
                    self.method,
                    path.display()
                ));
            }
        }
        Ok(())
    }

    pub fn baseline_path(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.out.join(format!("{}.nncm", Method::Baseline)))
    }

    /// The config seed, else `ENERGYCOMP_SEED`, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(seed) = self.seed {
            return Ok(seed);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            patience: t.patience,
            min_delta: t.min_delta,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            seed,
        }
    }
}
