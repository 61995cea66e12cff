//! Experiment configuration documents.
//!
//! Configs are JSON, parsed strictly (unknown keys are errors reported with
//! their path) and identified by a hash of their canonical serialization.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::composite::{BetaWeights, SchemeKind};
use crate::data::{
    gaussian_blobs, load_cifar10_bin, randomize_labels, train_val_split, two_moons, DataError,
    Dataset, RandomizationLevel,
};
use crate::netcore::{Activation, MlpSpec, NetError, OutputKind};
use crate::optim::TrainConfig;
use crate::spectral::SpectralConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config section `{0}` is required by this command")]
    MissingSection(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    TwoMoons {
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    GaussianBlobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        path: PathBuf,
        max_records: usize,
    },
}

fn default_noise() -> f64 {
    0.1
}
fn default_spread() -> f64 {
    1.0
}
fn default_val_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Fraction of samples kept for training; the rest validate.
    #[serde(default = "default_val_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Fraction of training labels redrawn uniformly.
    #[serde(default)]
    pub randomization: f64,
    #[serde(default)]
    pub randomization_seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        RandomizationLevel::new(self.randomization).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "dataset.train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Builds the dataset and splits it into `(train, val)`; label
    /// randomization touches the training part only.
    pub fn load(&self) -> Result<(Dataset, Dataset), DataError> {
        let full = match &self.source {
            DatasetSource::TwoMoons { n, noise, seed } => two_moons(*n, *noise, *seed)?,
            DatasetSource::GaussianBlobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => gaussian_blobs(*classes, *per_class, *dim, *spread, *seed)?,
            DatasetSource::Cifar10 { path, max_records } => load_cifar10_bin(path, *max_records)?,
        };
        let (train, val) = train_val_split(&full, self.train_fraction, self.split_seed)?;
        let train = if self.randomization > 0.0 {
            randomize_labels(&train, RandomizationLevel::new(self.randomization)?, self.randomization_seed)?
        } else {
            train
        };
        Ok((train, val))
    }
}

fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_output() -> OutputKind {
    OutputKind::Softmax
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_output")]
    pub output: OutputKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: default_activation(),
            output: default_output(),
        }
    }
}

impl ModelConfig {
    pub fn spec_for(&self, data: &Dataset) -> Result<MlpSpec, NetError> {
        let mut widths = vec![data.input_dim()];
        widths.extend(&self.hidden);
        widths.push(data.targets.cols());
        MlpSpec::new(widths, self.activation, self.output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: -3.0,
            hi: 3.0,
            n: 601,
        }
    }
}

/// `min(cap, base + curvature (x − center)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ClippedQuadratic {
    pub center: f64,
    #[serde(default = "default_base")]
    pub base: f64,
    #[serde(default = "default_curvature")]
    pub curvature: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
}

fn default_base() -> f64 {
    0.05
}
fn default_curvature() -> f64 {
    0.1
}
fn default_cap() -> f64 {
    0.95
}

impl ClippedQuadratic {
    pub fn centered(center: f64) -> Self {
        Self {
            center,
            base: default_base(),
            curvature: default_curvature(),
            cap: default_cap(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.base + self.curvature * (x - self.center).powi(2)).min(self.cap)
    }
}

fn default_l1() -> ClippedQuadratic {
    ClippedQuadratic::centered(1.0)
}
fn default_l2() -> ClippedQuadratic {
    ClippedQuadratic::centered(-1.0)
}
fn default_p_opt_beta() -> f64 {
    10.0
}
fn default_p_list() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0]
}
fn default_betas2() -> BetaWeights {
    BetaWeights::uniform(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct KlSweepConfig {
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_l1")]
    pub l1: ClippedQuadratic,
    #[serde(default = "default_l2")]
    pub l2: ClippedQuadratic,
    /// Inverse temperature of the reference density on `min(L1, L2)`.
    #[serde(default = "default_p_opt_beta")]
    pub p_opt_beta: f64,
    #[serde(default = "default_betas2")]
    pub betas: BetaWeights,
    #[serde(default = "default_p_list")]
    pub p_list: Vec<f64>,
}

impl Default for KlSweepConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            l1: default_l1(),
            l2: default_l2(),
            p_opt_beta: default_p_opt_beta(),
            betas: default_betas2(),
            p_list: default_p_list(),
        }
    }
}

fn default_tones() -> Vec<f64> {
    vec![1.0, 3.0, 5.0]
}
fn default_amps() -> Vec<f64> {
    vec![1.0, 1.0, 1.0]
}
fn default_points() -> usize {
    256
}
fn default_width() -> usize {
    200
}
fn default_threshold() -> f64 {
    0.2
}
fn default_spectral_epochs() -> usize {
    1500
}
fn default_spectral_lr() -> f64 {
    0.01
}
fn default_spectral_init() -> f64 {
    3.0
}
fn default_spectral_schemes() -> Vec<SchemeKind> {
    vec![SchemeKind::Single(0), SchemeKind::Multi, SchemeKind::Nonlinear(2.0)]
}
fn default_spectral_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SpectralSection {
    #[serde(default = "default_tones")]
    pub tones: Vec<f64>,
    #[serde(default = "default_amps")]
    pub amplitudes: Vec<f64>,
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_spectral_epochs")]
    pub epochs: usize,
    #[serde(default = "default_spectral_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_spectral_init")]
    pub init_scale: f64,
    #[serde(default = "default_spectral_schemes")]
    pub schemes: Vec<SchemeKind>,
    #[serde(default = "default_spectral_seeds")]
    pub seeds: Vec<u64>,
}

impl SpectralSection {
    pub fn to_config(&self) -> SpectralConfig {
        let base = SpectralConfig::default();
        let mut train = base.train;
        train.epochs = self.epochs;
        train.batch_size = self.n_points;
        train.optimizer.learning_rate = self.learning_rate;
        train.init_scale = self.init_scale;
        SpectralConfig {
            tones: self.tones.clone(),
            amplitudes: self.amplitudes.clone(),
            n_points: self.n_points,
            width: self.width,
            threshold: self.threshold,
            train,
        }
    }

}

fn default_sigma() -> f64 {
    0.01
}
fn default_prior_std() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_l_max() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.05
}
fn default_mc() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    /// Model file written by `train`.
    pub model: PathBuf,
    /// Posterior standard deviation around the trained weights.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Standard deviation of the zero-mean prior.
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_l_max")]
    pub l_max: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub eps_dp: f64,
    #[serde(default = "default_mc")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Top-level document. Each command reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Schemes compared by `train`; defaults to the scheme in `train`.
    #[serde(default)]
    pub schemes: Vec<SchemeKind>,
    /// Seeds for `train`; defaults to the seed in `train`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub klsweep: Option<KlSweepConfig>,
    #[serde(default)]
    pub spectral: Option<SpectralSection>,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if let Some(d) = &self.dataset {
            d.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
            for s in &self.schemes {
                TrainConfig {
                    scheme: *s,
                    ..t.clone()
                }
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("schemes: {e}")))?;
            }
        }
        if let Some(k) = &self.klsweep {
            if !(k.grid.lo < k.grid.hi) {
                return inv(format!("klsweep.grid: lo ({}) must be below hi ({})", k.grid.lo, k.grid.hi));
            }
            if k.grid.n < 3 {
                return inv("klsweep.grid.n must be at least 3".into());
            }
            if k.betas.len() != 2 {
                return inv("klsweep.betas needs two weights".into());
            }
            if k.p_list.is_empty() || k.p_list.iter().any(|p| p.is_nan() || *p < 1.0) {
                return inv("klsweep.p_list must be nonempty with every p ≥ 1".into());
            }
            if !(k.p_opt_beta > 0.0) {
                return inv("klsweep.p_opt_beta must be positive".into());
            }
        }
        if let Some(s) = &self.spectral {
            if s.tones.len() != s.amplitudes.len() || s.tones.is_empty() {
                return inv("spectral.tones and amplitudes must be nonempty and equally long".into());
            }
            if s.schemes.is_empty() || s.seeds.is_empty() {
                return inv("spectral.schemes and seeds must be nonempty".into());
            }
            if !(s.threshold > 0.0 && s.threshold < 1.0) {
                return inv("spectral.threshold must lie in (0, 1)".into());
            }
            s.to_config()
                .train
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("spectral: {e}")))?;
        }
        if let Some(b) = &self.bounds {
            if !(b.lambda > 0.5) {
                return inv(format!(
                    "bounds.lambda = {} is outside the linear PAC-Bayes bound regime (requires lambda > 1/2)",
                    b.lambda
                ));
            }
            if !(b.sigma > 0.0 && b.prior_std > 0.0 && b.l_max > 0.0) {
                return inv("bounds.sigma, prior_std and l_max must be positive".into());
            }
            if !(b.delta > 0.0 && b.delta < 1.0) || !(b.eps_dp >= 0.0) || b.n_samples == 0 {
                return inv("bounds: need delta in (0, 1), eps_dp ≥ 0, n_samples ≥ 1".into());
            }
        }
        Ok(())
    }
}

/// Strict parse with field paths in errors, followed by validation.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// First 16 hex digits of the SHA-256 of the canonical JSON form.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&canonical);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_sections_parse() {
        let c = parse_config(r#"{"klsweep": {}}"#).unwrap();
        assert_eq!(c.klsweep.unwrap(), KlSweepConfig::default());
        let c = parse_config(
            r#"{"dataset": {"source": {"kind": "two_moons", "n": 100}},
                "model": {"hidden": [8]},
                "train": {"scheme": {"nonlinear": 2.0}, "epochs": 10, "batch_size": 16, "seed": 3},
                "schemes": [{"single": 0}, "multi", {"nonlinear": 2.0}]}"#,
        )
        .unwrap();
        assert_eq!(c.schemes.len(), 3);
        assert_eq!(c.train.unwrap().warmup_epochs, 5);
    }

    #[test]
    fn unknown_keys_report_paths() {
        let e = parse_config(r#"{"dataset": {"source": {"kind": "two_moons", "n": 10, "nois": 0.1}}}"#)
            .unwrap_err();
        match e {
            ConfigError::Parse { path, message } => {
                assert!(path.starts_with("dataset.source"), "{path}");
                assert!(message.contains("nois"));
            }
            other => panic!("{other}"),
        }
        assert!(parse_config(r#"{"klsweep": {"grid": {"lo": 0, "hi": 1, "n": 5, "m": 1}}}"#).is_err());
    }

    #[test]
    fn validation_errors() {
        let e = parse_config(r#"{"klsweep": {"grid": {"lo": 1, "hi": 1, "n": 11}}}"#).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)));
        let e = parse_config(r#"{"bounds": {"model": "m.json", "lambda": 0.5}}"#).unwrap_err();
        assert!(e.to_string().contains("lambda > 1/2"));
        let e = parse_config(
            r#"{"train": {"scheme": "multi", "epochs": 5, "batch_size": 4, "seed": 0, "warmup_epochs": 5}}"#,
        )
        .unwrap_err();
        assert!(e.to_string().contains("warmup"));
    }

    #[test]
    fn hash_is_stable() {
        let a = parse_config(r#"{"klsweep": {"p_list": [1, 2]}}"#).unwrap();
        let b = parse_config(r#"{ "klsweep" : { "p_list" : [1.0, 2.0] } }"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn schema_lists_sections() {
        let s = config_schema();
        let props = &s["properties"];
        for k in ["dataset", "model", "train", "klsweep", "spectral", "bounds"] {
            assert!(props.get(k).is_some(), "{k}");
        }
    }
}
