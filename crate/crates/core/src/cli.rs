//! Command line interface.
//!
//! Every experiment command reads one JSON config and writes into
//! `<out>/<config hash>/`, next to a copy of the config and a manifest of the
//! files produced. Exit codes: 0 success, 1 invalid input, 2 runtime failure,
//! 3 failed invariant.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{boltzmann, generalized_entropy, scheme_kl_report, Grid, GridField};
use crate::composite::{mutation, CompositeMode};
use crate::config::{config_hash, config_schema, load_config, ConfigError, ExperimentConfig};
use crate::netcore::{MlpSpec, ParamVector};
use crate::optim::{run_scheme_comparison, OptimError, TrajectoryRecord};
use crate::pacbayes::{
    kl_gaussians, linear_pac_bound, risk_certificate, BoundParams, GaussianPosterior, GaussianPrior,
};
use crate::spectral::spectral_scheme_compare;
use crate::verify::{run_verify, VerifySummary};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "nlcollab", version, about = "Collaborative loss training and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; results go to `<out>/<config hash>/` (default `runs`).
    /// `verify` writes its summary here only when given.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Replaces every run seed in the config.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    #[arg(long, global = true, hide = true)]
    pub mutate: Option<Mutation>,
    #[arg(long, global = true, hide = true, default_value_t = 0)]
    pub mutation_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mutation {
    /// Flip the sign of one coordinate of the composite gradient.
    CompositeGradSign,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the built-in invariant checks.
    Verify,
    /// Train every configured scheme and seed.
    Train,
    /// KL divergences and generalized entropy on a loss-landscape grid.
    Klsweep,
    /// Frequency capture comparison on a multi-tone target.
    Spectral,
    /// PAC-Bayes certificate for a trained model.
    Bounds,
    /// Print JSON schemas of the config and verify summary.
    #[command(hide = true)]
    Schema,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("--config is required for this command")]
    NoConfig,
    #[error("model file {0} does not exist")]
    MissingModel(PathBuf),
    #[error("cannot parse model file {path}: {message}")]
    BadModel { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Read { .. }) => EXIT_INVALID,
            CliError::Config(_) | CliError::NoConfig => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(ConfigError::Read { .. }) => "config_read",
            CliError::Config(ConfigError::Parse { .. }) => "config_parse",
            CliError::Config(ConfigError::Invalid(_)) => "config_invalid",
            CliError::Config(ConfigError::MissingSection(_)) => "config_missing_section",
            CliError::NoConfig => "no_config",
            CliError::MissingModel(_) => "missing_model",
            CliError::BadModel { .. } => "bad_model",
            CliError::Io { .. } => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// Machine-readable form printed to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Trained network as written by `train` and read by `bounds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBoundReport {
    pub emp_risk: f64,
    pub kl_q_p: f64,
    pub lambda: f64,
    pub l_max: f64,
    pub m: usize,
    pub delta: f64,
    pub bound: f64,
}

struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(root: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&root).map_err(|source| CliError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Self {
            root,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|source| CliError::Io { path, source })?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(runtime)?;
        self.write(name, &(text + "\n"))
    }

    fn finish(mut self, command: &str, hash: &str) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: hash.to_string(),
            files: self.files.clone(),
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(self.root)
    }
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Rewrites all run seeds (not dataset generation seeds).
pub fn apply_seed_override(cfg: &mut ExperimentConfig, seed: u64) {
    if let Some(t) = &mut cfg.train {
        t.seed = seed;
    }
    if !cfg.seeds.is_empty() {
        cfg.seeds = vec![seed];
    }
    if let Some(s) = &mut cfg.spectral {
        s.seeds = vec![seed];
    }
    if let Some(b) = &mut cfg.bounds {
        b.seed = seed;
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<u8, CliError> {
    if let Some(j) = cli.jobs {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    match cli.mutate {
        Some(Mutation::CompositeGradSign) => mutation::set_grad_sign_flip(Some(cli.mutation_seed as usize)),
        None => mutation::set_grad_sign_flip(None),
    }
    match cli.command {
        Command::Verify => cmd_verify(cli),
        Command::Schema => {
            let schema = serde_json::json!({
                "config": config_schema(),
                "verify_summary": schemars::schema_for!(VerifySummary),
            });
            println!("{}", serde_json::to_string_pretty(&schema).map_err(runtime)?);
            Ok(EXIT_OK)
        }
        Command::Train | Command::Klsweep | Command::Spectral | Command::Bounds => {
            let path = cli.config.as_ref().ok_or(CliError::NoConfig)?;
            let mut cfg = load_config(path)?;
            if let Some(s) = cli.seed_override {
                apply_seed_override(&mut cfg, s);
            }
            let hash = config_hash(&cfg);
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let mut dir = RunDir::create(out.join(&hash))?;
            dir.write_json("config.json", &cfg)?;
            let name = match cli.command {
                Command::Train => {
                    cmd_train(&cfg, &hash, &mut dir)?;
                    "train"
                }
                Command::Klsweep => {
                    cmd_klsweep(&cfg, &mut dir)?;
                    "klsweep"
                }
                Command::Spectral => {
                    cmd_spectral(&cfg, &hash, &mut dir)?;
                    "spectral"
                }
                _ => {
                    cmd_bounds(&cfg, &mut dir)?;
                    "bounds"
                }
            };
            let root = dir.finish(name, &hash)?;
            println!("{}", root.display());
            Ok(EXIT_OK)
        }
    }
}

fn cmd_verify(cli: &Cli) -> Result<u8, CliError> {
    let summary = run_verify();
    let text = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    println!("{text}");
    if let Some(out) = &cli.out {
        let mut dir = RunDir::create(out.clone())?;
        dir.write("verify_summary.json", &(text + "\n"))?;
    }
    Ok(if summary.passed { EXIT_OK } else { EXIT_INVARIANT })
}

fn cmd_train(cfg: &ExperimentConfig, hash: &str, dir: &mut RunDir) -> Result<(), CliError> {
    let data_cfg = cfg.dataset.as_ref().ok_or(ConfigError::MissingSection("dataset"))?;
    let train_cfg = cfg.train.as_ref().ok_or(ConfigError::MissingSection("train"))?;
    let model = cfg.model.clone().unwrap_or_default();
    let (train, val) = data_cfg.load().map_err(runtime)?;
    let spec = model.spec_for(&train).map_err(runtime)?;
    let schemes = if cfg.schemes.is_empty() {
        vec![train_cfg.scheme]
    } else {
        cfg.schemes.clone()
    };
    let seeds = if cfg.seeds.is_empty() {
        vec![train_cfg.seed]
    } else {
        cfg.seeds.clone()
    };
    let table = match run_scheme_comparison(&spec, &train, &val, train_cfg, &schemes, &seeds) {
        Ok(t) => t,
        Err(OptimError::Diverged { epoch, reason, partial }) => {
            let stem = format!(
                "trajectory_{}_seed{}_diverged",
                file_stem(&partial.config.scheme.label()),
                partial.config.seed
            );
            dir.write(&format!("{stem}.csv"), &partial.to_csv())?;
            return Err(CliError::Runtime(format!(
                "training diverged at epoch {epoch}: {reason}; partial trajectory in {stem}.csv"
            )));
        }
        Err(e) => return Err(runtime(e)),
    };
    for block in &table.blocks {
        for rec in &block.trajectories {
            write_trajectory(dir, rec, hash)?;
        }
    }
    dir.write("comparison.csv", &table.to_csv())
}

fn write_trajectory(dir: &mut RunDir, rec: &TrajectoryRecord, hash: &str) -> Result<(), CliError> {
    let stem = format!("{}_seed{}", file_stem(&rec.config.scheme.label()), rec.config.seed);
    dir.write(&format!("trajectory_{stem}.csv"), &rec.to_csv())?;
    let mut meta = rec.metadata_json();
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("config_hash".into(), hash.into());
    }
    dir.write_json(&format!("trajectory_{stem}.json"), &meta)?;
    let model = ModelFile {
        spec: rec.spec.clone(),
        params: rec.final_params.clone(),
        config_hash: hash.to_string(),
    };
    dir.write_json(&format!("model_{stem}.json"), &model)
}

fn cmd_klsweep(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let k = cfg.klsweep.as_ref().ok_or(ConfigError::MissingSection("klsweep"))?;
    let grid = Grid::line(k.grid.lo, k.grid.hi, k.grid.n).map_err(runtime)?;
    let l1 = GridField::from_fn(&grid, |x| k.l1.eval(x[0])).map_err(runtime)?;
    let l2 = GridField::from_fn(&grid, |x| k.l2.eval(x[0])).map_err(runtime)?;
    let floor = GridField::zip_with(&[&l1, &l2], |v| Ok(v[0].min(v[1]))).map_err(runtime)?;
    let (p_opt, _) = boltzmann(&floor, k.p_opt_beta).map_err(runtime)?;
    let mut entropy: BTreeMap<&str, BTreeMap<String, f64>> = BTreeMap::new();
    for (mode, name) in [
        (CompositeMode::Weighted, "weighted"),
        (CompositeMode::UnweightedNorm, "unweighted_norm"),
    ] {
        let report = scheme_kl_report(&l1, &l2, &p_opt, &k.betas, &k.p_list, mode).map_err(runtime)?;
        dir.write_json(&format!("kl_report_{name}.json"), &report)?;
        let mut per_p = BTreeMap::new();
        for &p in &k.p_list {
            let s = generalized_entropy(&[&l1, &l2], &k.betas, p, mode).map_err(runtime)?;
            per_p.insert(crate::analysis::p_key(p), s);
        }
        entropy.insert(name, per_p);
    }
    dir.write_json("entropy.json", &entropy)
}

fn cmd_spectral(cfg: &ExperimentConfig, hash: &str, dir: &mut RunDir) -> Result<(), CliError> {
    let s = cfg.spectral.as_ref().ok_or(ConfigError::MissingSection("spectral"))?;
    let sc = s.to_config();
    for &seed in &s.seeds {
        let report = spectral_scheme_compare(&sc, &s.schemes, seed).map_err(runtime)?;
        dir.write(&format!("spectral_seed{seed}.csv"), &report.to_csv())?;
        let mut summary = report.summary_json();
        if let Some(obj) = summary.as_object_mut() {
            obj.insert("config_hash".into(), hash.into());
        }
        dir.write_json(&format!("spectral_seed{seed}.json"), &summary)?;
    }
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelFile, CliError> {
    if !path.exists() {
        return Err(CliError::MissingModel(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let model: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::BadModel {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    model.spec.validate().map_err(|e| CliError::BadModel {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if model.params.len() != model.spec.param_count() {
        return Err(CliError::BadModel {
            path: path.to_path_buf(),
            message: format!(
                "{} parameters for a network with {}",
                model.params.len(),
                model.spec.param_count()
            ),
        });
    }
    Ok(model)
}

fn cmd_bounds(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let b = cfg.bounds.as_ref().ok_or(ConfigError::MissingSection("bounds"))?;
    let data_cfg = cfg.dataset.as_ref().ok_or(ConfigError::MissingSection("dataset"))?;
    let model = read_model(&b.model)?;
    let (train, _) = data_cfg.load().map_err(runtime)?;
    if train.input_dim() != model.spec.input_dim() {
        return Err(CliError::Runtime(format!(
            "model expects {} inputs, dataset has {}",
            model.spec.input_dim(),
            train.input_dim()
        )));
    }
    let q = GaussianPosterior::new(model.params.clone(), b.sigma).map_err(runtime)?;
    let p = GaussianPrior::centered(model.params.len(), b.prior_std).map_err(runtime)?;
    let params = BoundParams {
        lambda: b.lambda,
        l_max: b.l_max,
        delta: b.delta,
        m: train.len(),
        eps_dp: b.eps_dp,
    };
    let cert = risk_certificate(&q, &p, &model.spec, &train, &params, b.n_samples, b.seed).map_err(runtime)?;
    dir.write_json("certificate.json", &cert)?;
    let kl = kl_gaussians(&q, &p).map_err(runtime)?;
    let bound = linear_pac_bound(cert.emp_risk, kl, &params).map_err(runtime)?;
    let linear = LinearBoundReport {
        emp_risk: cert.emp_risk,
        kl_q_p: kl,
        lambda: b.lambda,
        l_max: b.l_max,
        m: params.m,
        delta: b.delta,
        bound,
    };
    dir.write_json("linear_bound.json", &linear)
}
