//! Training loop for single-loss, linear multi-loss and power-mean schemes.
//!
//! Per minibatch: evaluate every loss term and its parameter gradient,
//! update the weights from the per-term gradient norms, compose the
//! gradients, add Gaussian noise, add the L2 term and take an optimizer
//! step. Epochs before `warmup_epochs` train on cross entropy alone for the
//! collaborative schemes. Runs are bit-reproducible from the config.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::{
    adaptive_betas, composite_param_grad, composite_value, constraint9_check,
    directional_curvature, BetaRule, BetaWeights, CompositeError, CompositeMode, SchemeKind,
};
use crate::data::Dataset;
use crate::losses::{loss_output_grad, loss_value, LossError, LossKind};
use crate::netcore::{backward_many, forward, init_params, Matrix, MlpSpec, NetError, ParamVector};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset incompatible with network: {0}")]
    Data(String),
    #[error("non-finite gradient at coordinate {coordinate}{}", epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default())]
    NonFiniteGradient {
        coordinate: usize,
        epoch: Option<usize>,
    },
    #[error("optimizer state has {state} entries, parameters have {params}")]
    StateShape { state: usize, params: usize },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        partial: Box<TrajectoryRecord>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            momentum: default_momentum(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::new(OptimizerKind::Adam, 1e-2)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

/// One SGD / momentum / Adam update in place.
pub fn optimizer_step(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut ParamVector,
    grad: &ParamVector,
) -> Result<(), OptimError> {
    if grad.len() != params.len() {
        return Err(OptimError::StateShape {
            state: grad.len(),
            params: params.len(),
        });
    }
    if state.first.len() != params.len() {
        return Err(OptimError::StateShape {
            state: state.first.len(),
            params: params.len(),
        });
    }
    if let Some(coordinate) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient {
            coordinate,
            epoch: None,
        });
    }
    state.step += 1;
    let lr = cfg.learning_rate;
    let w = params.as_mut_slice();
    let g = grad.as_slice();
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
        OptimizerKind::Momentum => {
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(state.first.iter_mut()) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - cfg.adam_beta1.powi(t);
            let c2 = 1.0 - cfg.adam_beta2.powi(t);
            for (((wi, gi), mi), vi) in w
                .iter_mut()
                .zip(g)
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                *mi = cfg.adam_beta1 * *mi + (1.0 - cfg.adam_beta1) * gi;
                *vi = cfg.adam_beta2 * *vi + (1.0 - cfg.adam_beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *wi -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
    Ok(())
}

/// Additive `N(0, ε²)` noise on gradient coordinates.
#[derive(Debug, Clone)]
pub struct GradientNoise {
    eps: f64,
    rng: ChaCha8Rng,
}

impl GradientNoise {
    pub fn new(eps: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Self { eps, rng }
    }

    pub fn perturb(&mut self, grad: &mut [f64]) {
        if self.eps == 0.0 {
            return;
        }
        for g in grad.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *g += self.eps * z;
        }
    }
}

fn default_terms() -> Vec<LossKind> {
    vec![LossKind::Ce, LossKind::Mse]
}
fn default_warmup() -> usize {
    5
}
fn default_init_scale() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: SchemeKind,
    /// Loss terms composed by the scheme; `single` indexes into this list.
    #[serde(default = "default_terms")]
    pub terms: Vec<LossKind>,
    #[serde(default)]
    pub mode: CompositeMode,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standard deviation of the additive gradient noise.
    #[serde(default)]
    pub noise_eps: f64,
    /// Leading epochs trained on cross entropy alone (collaborative schemes).
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub l2_reg: f64,
    pub seed: u64,
    #[serde(default)]
    pub beta_rule: BetaRule,
    /// Starting weights; uniform when absent. Used throughout by the
    /// `fixed` rule.
    #[serde(default)]
    pub initial_betas: Option<BetaWeights>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Evaluate the curvature condition along the descent direction each
    /// epoch.
    #[serde(default = "default_true")]
    pub track_constraint9: bool,
    /// Record wall-clock seconds; off keeps trajectory files byte-stable.
    #[serde(default)]
    pub record_timing: bool,
}

impl TrainConfig {
    pub fn new(scheme: SchemeKind, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            scheme,
            terms: default_terms(),
            mode: CompositeMode::Weighted,
            optimizer: OptimizerConfig::default(),
            epochs,
            batch_size,
            noise_eps: 0.0,
            warmup_epochs: 0,
            l2_reg: 0.0,
            seed,
            beta_rule: BetaRule::Softmax,
            initial_betas: None,
            init_scale: default_init_scale(),
            track_constraint9: true,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        if self.terms.is_empty() {
            return bad("at least one loss term is required".into());
        }
        if let Some(k) = self.terms.iter().find(|k| !k.is_differentiable()) {
            return bad(format!("loss term {k:?} is not differentiable"));
        }
        if !(self.optimizer.learning_rate > 0.0) || !self.optimizer.learning_rate.is_finite() {
            return bad("learning_rate must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.noise_eps >= 0.0) || !(self.l2_reg >= 0.0) || !(self.init_scale >= 0.0) {
            return bad("noise_eps, l2_reg and init_scale must be nonnegative".into());
        }
        match self.scheme {
            SchemeKind::Single(m) if m >= self.terms.len() => {
                return bad(format!("single scheme index {m} out of range"));
            }
            SchemeKind::Nonlinear(p) if p.is_nan() || p < 1.0 => {
                return bad(format!("nonlinear scheme power {p} is below 1"));
            }
            _ => {}
        }
        if self.collaborative() && self.warmup_epochs > 0 && self.ce_index().is_none() {
            return bad("warmup requires a cross-entropy term".into());
        }
        if let Some(b) = &self.initial_betas {
            if b.len() != self.terms.len() {
                return bad("initial_betas length differs from terms".into());
            }
        }
        if self.beta_rule == BetaRule::MaxFirst && self.terms.len() != 2 {
            return bad("max_first weighting needs exactly two terms".into());
        }
        Ok(())
    }

    fn collaborative(&self) -> bool {
        !matches!(self.scheme, SchemeKind::Single(_))
    }

    fn ce_index(&self) -> Option<usize> {
        self.terms.iter().position(|&k| k == LossKind::Ce)
    }

    fn base_betas(&self) -> BetaWeights {
        self.initial_betas
            .clone()
            .unwrap_or_else(|| BetaWeights::uniform(self.terms.len()))
    }
}

/// Telemetry after one epoch, evaluated on the full training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Raw value of every loss term, in `terms` order.
    pub losses: Vec<f64>,
    pub composite: f64,
    /// Weights used by the last minibatch of the epoch.
    pub betas: Vec<f64>,
    /// Mean over the epoch's minibatches of each term's gradient norm.
    pub grad_norms: Vec<f64>,
    /// Curvature condition for every term along the descent direction.
    pub constraint9: Option<bool>,
    pub warmup: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub config: TrainConfig,
    pub spec: MlpSpec,
    pub initial_losses: Vec<f64>,
    pub rows: Vec<EpochRow>,
    pub final_params: ParamVector,
}

impl TrajectoryRecord {
    pub fn csv_header(terms: &[LossKind]) -> String {
        let mut cols = vec!["epoch".to_string(), "train_acc".into(), "val_acc".into()];
        cols.extend(terms.iter().map(|k| format!("loss_{}", k.name())));
        cols.push("composite".into());
        cols.extend((1..=terms.len()).map(|i| format!("beta_{i}")));
        cols.extend((1..=terms.len()).map(|i| format!("gnorm_{i}")));
        cols.push("constraint9".into());
        cols.push("seconds".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(&self.config.terms);
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![
                r.epoch.to_string(),
                r.train_acc.to_string(),
                r.val_acc.to_string(),
            ];
            fields.extend(r.losses.iter().map(f64::to_string));
            fields.push(r.composite.to_string());
            fields.extend(r.betas.iter().map(f64::to_string));
            fields.extend(r.grad_norms.iter().map(f64::to_string));
            fields.push(match r.constraint9 {
                Some(true) => "1".into(),
                Some(false) => "0".into(),
                None => String::new(),
            });
            fields.push(r.seconds.to_string());
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    /// Sidecar metadata: the full config plus the network spec.
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "spec": self.spec,
            "epochs_recorded": self.rows.len(),
        })
    }
}

fn accuracy(pred: &Matrix, target: &Matrix) -> Result<f64, OptimError> {
    Ok(1.0 - loss_value(LossKind::ZeroOne, pred, target)?.value)
}

fn loss_values(terms: &[LossKind], pred: &Matrix, target: &Matrix) -> Result<Vec<f64>, OptimError> {
    terms
        .iter()
        .map(|&k| Ok(loss_value(k, pred, target)?.value))
        .collect()
}

/// Loss values and per-term parameter gradients on one batch.
fn term_gradients(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &Matrix,
    targets: &Matrix,
    terms: &[LossKind],
) -> Result<(Vec<f64>, Vec<ParamVector>), OptimError> {
    let mut values = Vec::with_capacity(terms.len());
    let (_, grads) = backward_many(spec, params, inputs, |pred| {
        let mut gs = Vec::with_capacity(terms.len());
        for &k in terms {
            values.push(loss_value(k, pred, targets)?.value);
            gs.push(loss_output_grad(k, pred, targets)?);
        }
        Ok::<_, OptimError>(gs)
    })?;
    Ok((values, grads))
}

/// Weights and power in force for one step.
struct StepObjective {
    betas: BetaWeights,
    p: f64,
}

fn step_objective(
    config: &TrainConfig,
    warmup: bool,
    grad_norms: &[f64],
) -> Result<StepObjective, OptimError> {
    let n = config.terms.len();
    Ok(match config.scheme {
        SchemeKind::Single(m) => StepObjective {
            betas: BetaWeights::one_hot(n, m),
            p: 1.0,
        },
        _ if warmup => StepObjective {
            betas: BetaWeights::one_hot(n, config.ce_index().expect("validated")),
            p: 1.0,
        },
        scheme => {
            let betas = match config.beta_rule {
                BetaRule::Fixed => config.base_betas(),
                rule => adaptive_betas(grad_norms, rule)?,
            };
            StepObjective {
                betas,
                p: scheme.power(),
            }
        }
    })
}

fn mode_for(config: &TrainConfig, warmup: bool) -> CompositeMode {
    if warmup || matches!(config.scheme, SchemeKind::Single(_)) {
        CompositeMode::Weighted
    } else {
        config.mode
    }
}

fn check_data(spec: &MlpSpec, data: &Dataset, which: &str) -> Result<(), OptimError> {
    if data.is_empty() {
        return Err(OptimError::Data(format!("{which} set is empty")));
    }
    if data.input_dim() != spec.input_dim() {
        return Err(OptimError::Data(format!(
            "{which} inputs have {} columns, network expects {}",
            data.input_dim(),
            spec.input_dim()
        )));
    }
    if data.targets.cols() != spec.output_dim() {
        return Err(OptimError::Data(format!(
            "{which} targets have {} columns, network outputs {}",
            data.targets.cols(),
            spec.output_dim()
        )));
    }
    Ok(())
}

pub fn train(
    spec: &MlpSpec,
    data: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<TrajectoryRecord, OptimError> {
    train_with_observer(spec, data, val, config, |_, _| {})
}

/// [`train`] that calls `observer(epoch, params)` after every epoch.
pub fn train_with_observer<F>(
    spec: &MlpSpec,
    data: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrajectoryRecord, OptimError>
where
    F: FnMut(usize, &ParamVector),
{
    config.validate()?;
    spec.validate()?;
    check_data(spec, data, "training")?;
    check_data(spec, val, "validation")?;

    let terms = &config.terms;
    let mut params = init_params(spec, config.seed, config.init_scale);
    let mut opt_state = OptimizerState::new(params.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut noise = GradientNoise::new(config.noise_eps, config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let started = Instant::now();

    let init_pred = forward(spec, &params, &data.inputs)?;
    let mut record = TrajectoryRecord {
        config: config.clone(),
        spec: spec.clone(),
        initial_losses: loss_values(terms, &init_pred, &data.targets)?,
        rows: Vec::with_capacity(config.epochs),
        final_params: params.clone(),
    };

    for epoch in 0..config.epochs {
        let warmup = config.collaborative() && epoch < config.warmup_epochs;
        let mode = mode_for(config, warmup);
        order.shuffle(&mut shuffle_rng);
        let mut norm_sums = vec![0.0; terms.len()];
        let mut batches = 0usize;
        let mut last_betas = config.base_betas();
        let mut last_p = 1.0;

        for chunk in order.chunks(config.batch_size) {
            let x = data.inputs.select_rows(chunk);
            let y = data.targets.select_rows(chunk);
            let (values, grads) = term_gradients(spec, &params, &x, &y, terms)?;
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                record.final_params = params.clone();
                return Err(OptimError::Diverged {
                    epoch,
                    reason: format!("non-finite {:?} loss", terms[i]),
                    partial: Box::new(record),
                });
            }
            let norms: Vec<f64> = grads.iter().map(ParamVector::norm).collect();
            for (s, n) in norm_sums.iter_mut().zip(&norms) {
                *s += n;
            }
            batches += 1;

            let obj = step_objective(config, warmup, &norms)?;
            let mut g = composite_param_grad(&values, &grads, &obj.betas, obj.p, mode)?;
            noise.perturb(g.as_mut_slice());
            if config.l2_reg > 0.0 {
                for (gi, wi) in g.as_mut_slice().iter_mut().zip(params.as_slice()) {
                    *gi += config.l2_reg * wi;
                }
            }
            optimizer_step(&config.optimizer, &mut opt_state, &mut params, &g).map_err(|e| match e {
                OptimError::NonFiniteGradient { coordinate, .. } => OptimError::NonFiniteGradient {
                    coordinate,
                    epoch: Some(epoch),
                },
                other => other,
            })?;
            last_betas = obj.betas;
            last_p = obj.p;
        }

        let pred = forward(spec, &params, &data.inputs)?;
        let losses = loss_values(terms, &pred, &data.targets)?;
        if let Some(i) = losses.iter().position(|v| !v.is_finite()) {
            record.final_params = params.clone();
            return Err(OptimError::Diverged {
                epoch,
                reason: format!("non-finite {:?} loss", terms[i]),
                partial: Box::new(record),
            });
        }
        let composite = composite_value(&losses, &last_betas, last_p, mode)?;
        let constraint9 = if config.track_constraint9 {
            constraint9_status(spec, &params, data, terms, &last_betas, last_p, mode)?
        } else {
            None
        };
        let val_pred = forward(spec, &params, &val.inputs)?;
        record.rows.push(EpochRow {
            epoch,
            train_acc: accuracy(&pred, &data.targets)?,
            val_acc: accuracy(&val_pred, &val.targets)?,
            losses,
            composite,
            betas: last_betas.as_slice().to_vec(),
            grad_norms: norm_sums.iter().map(|s| s / batches as f64).collect(),
            constraint9,
            warmup,
            seconds: if config.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        observer(epoch, &params);
    }
    record.final_params = params;
    Ok(record)
}

/// Whether `(p − 1) g_j² + L_j h_j > 0` holds for every term, where `g_j`
/// and `h_j` are directional derivatives of `L_j` along the full-batch
/// descent direction of the composite objective.
fn constraint9_status(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    terms: &[LossKind],
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<Option<bool>, OptimError> {
    let (values, grads) = term_gradients(spec, params, &data.inputs, &data.targets, terms)?;
    let g = composite_param_grad(&values, &grads, betas, p, mode)?;
    let norm = g.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Ok(None);
    }
    let dir: Vec<f64> = g.as_slice().iter().map(|v| -v / norm).collect();
    let mut all = true;
    for (j, &kind) in terms.iter().enumerate() {
        let f = |w: &[f64]| {
            forward(spec, &ParamVector(w.to_vec()), &data.inputs)
                .ok()
                .and_then(|pr| loss_value(kind, &pr, &data.targets).ok())
                .map_or(f64::NAN, |v| v.value)
        };
        let (d1, d2) = match directional_curvature(f, params.as_slice(), &dir, 1e-4) {
            Ok(v) => v,
            Err(_) => return Ok(None),
        };
        all &= constraint9_check(values[j], d1, d2, p);
    }
    Ok(Some(all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeBlock {
    pub scheme: SchemeKind,
    pub seeds: Vec<u64>,
    pub mean_train_acc: Vec<f64>,
    pub std_train_acc: Vec<f64>,
    pub mean_val_acc: Vec<f64>,
    pub std_val_acc: Vec<f64>,
    pub trajectories: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub blocks: Vec<SchemeBlock>,
}

impl ComparisonTable {
    /// Columns: scheme, epoch, mean/std of train and validation accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,epoch,train_acc_mean,train_acc_std,val_acc_mean,val_acc_std\n");
        for b in &self.blocks {
            for e in 0..b.mean_train_acc.len() {
                let _ = writeln!(
                    out,
                    "{},{e},{},{},{},{}",
                    b.scheme.label(),
                    b.mean_train_acc[e],
                    b.std_train_acc[e],
                    b.mean_val_acc[e],
                    b.std_val_acc[e]
                );
            }
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains every scheme under every seed (in parallel) and aggregates
/// per-epoch accuracy statistics per scheme.
pub fn run_scheme_comparison(
    spec: &MlpSpec,
    data: &Dataset,
    val: &Dataset,
    base: &TrainConfig,
    schemes: &[SchemeKind],
    seeds: &[u64],
) -> Result<ComparisonTable, OptimError> {
    if schemes.is_empty() || seeds.is_empty() {
        return Err(OptimError::Config("schemes and seeds must be nonempty".into()));
    }
    let jobs: Vec<(SchemeKind, u64)> = schemes
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs: Vec<TrajectoryRecord> = jobs
        .par_iter()
        .map(|&(scheme, seed)| {
            let cfg = TrainConfig {
                scheme,
                seed,
                ..base.clone()
            };
            train(spec, data, val, &cfg)
        })
        .collect::<Result<_, _>>()?;
    let mut runs = runs.into_iter();
    let blocks = schemes
        .iter()
        .map(|&scheme| {
            let trajectories: Vec<TrajectoryRecord> = runs.by_ref().take(seeds.len()).collect();
            let epochs = trajectories[0].rows.len();
            let stat = |f: fn(&EpochRow) -> f64| -> (Vec<f64>, Vec<f64>) {
                (0..epochs)
                    .map(|e| {
                        let xs: Vec<f64> = trajectories.iter().map(|t| f(&t.rows[e])).collect();
                        mean_std(&xs)
                    })
                    .unzip()
            };
            let (mean_train_acc, std_train_acc) = stat(|r| r.train_acc);
            let (mean_val_acc, std_val_acc) = stat(|r| r.val_acc);
            SchemeBlock {
                scheme,
                seeds: seeds.to_vec(),
                mean_train_acc,
                std_train_acc,
                mean_val_acc,
                std_val_acc,
                trajectories,
            }
        })
        .collect();
    Ok(ComparisonTable { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_blobs, two_moons};
    use crate::netcore::{Activation, OutputKind};

    #[test]
    fn sgd_step_example() {
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1);
        let mut st = OptimizerState::new(1);
        let mut w = ParamVector(vec![1.0]);
        optimizer_step(&cfg, &mut st, &mut w, &ParamVector(vec![2.0])).unwrap();
        assert!((w.0[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam] {
            let cfg = OptimizerConfig::new(kind, 0.5);
            let mut st = OptimizerState::new(2);
            let mut w = ParamVector(vec![0.3, -1.2]);
            for _ in 0..100 {
                optimizer_step(&cfg, &mut st, &mut w, &ParamVector(vec![0.0, 0.0])).unwrap();
            }
            assert_eq!(w.0, vec![0.3, -1.2]);
            assert_eq!(st.step, 100);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1);
        let mut st = OptimizerState::new(2);
        let mut w = ParamVector(vec![0.0, 0.0]);
        let err = optimizer_step(&cfg, &mut st, &mut w, &ParamVector(vec![0.0, f64::INFINITY]))
            .unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient { coordinate: 1, .. }));
    }

    #[test]
    fn noise_variance_matches_eps() {
        let eps = 0.3;
        let mut noise = GradientNoise::new(eps, 17);
        let mut buf = vec![0.0; 200_000];
        noise.perturb(&mut buf);
        let (mean, sd) = mean_std(&buf);
        assert!(mean.abs() < 0.01);
        assert!(((sd * sd) / (eps * eps) - 1.0).abs() < 0.05);
    }

    fn regression_set() -> Dataset {
        // y = 2 x0 − x1 + 0.5, noiseless
        let blobs = gaussian_blobs(2, 40, 2, 1.0, 3).unwrap();
        let ys: Vec<f64> = blobs
            .inputs
            .iter_rows()
            .map(|r| 2.0 * r[0] - r[1] + 0.5)
            .collect();
        Dataset {
            name: "linear".into(),
            inputs: blobs.inputs,
            targets: Matrix::from_vec(80, 1, ys).unwrap(),
            num_classes: None,
            randomized_mask: None,
        }
    }

    #[test]
    fn convex_regression_descends() {
        let spec = MlpSpec::new(vec![2, 1], Activation::Relu, OutputKind::Linear).unwrap();
        let data = regression_set();
        let mut cfg = TrainConfig::new(SchemeKind::Single(0), 50, 16, 1);
        cfg.terms = vec![LossKind::Mse];
        cfg.optimizer = OptimizerConfig::new(OptimizerKind::Sgd, 0.01);
        let t = train(&spec, &data, &data, &cfg).unwrap();
        assert!(t.rows.last().unwrap().losses[0] < t.initial_losses[0]);
    }

    #[test]
    fn noise_and_decay_recorded_verbatim() {
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Tanh, OutputKind::Softmax).unwrap();
        let data = two_moons(40, 0.1, 0).unwrap();
        let mut cfg = TrainConfig::new(SchemeKind::Nonlinear(2.0), 3, 10, 5);
        cfg.noise_eps = 1e-4;
        cfg.l2_reg = 5e-4;
        let t = train(&spec, &data, &data, &cfg).unwrap();
        let meta = t.metadata_json();
        assert_eq!(meta["config"]["noise_eps"].as_f64(), Some(1e-4));
        assert_eq!(meta["config"]["l2_reg"].as_f64(), Some(5e-4));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = TrainConfig::new(SchemeKind::Multi, 5, 10, 0);
        cfg.warmup_epochs = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(SchemeKind::Single(2), 5, 10, 0);
        assert!(cfg.validate().is_err());
        cfg.scheme = SchemeKind::Nonlinear(0.5);
        assert!(cfg.validate().is_err());
        cfg.scheme = SchemeKind::Multi;
        cfg.optimizer.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divergence_carries_partial_trajectory() {
        let spec = MlpSpec::new(vec![2, 1], Activation::Relu, OutputKind::Linear).unwrap();
        let data = regression_set();
        let mut cfg = TrainConfig::new(SchemeKind::Single(0), 400, 80, 1);
        cfg.terms = vec![LossKind::Mse];
        cfg.optimizer = OptimizerConfig::new(OptimizerKind::Sgd, 10.0);
        cfg.track_constraint9 = false;
        match train(&spec, &data, &data, &cfg) {
            Err(OptimError::Diverged { partial, epoch, .. }) => {
                assert_eq!(partial.rows.len(), epoch);
            }
            Err(OptimError::NonFiniteGradient { epoch, .. }) => assert!(epoch.is_some()),
            other => panic!("expected divergence, got {:?}", other.map(|t| t.rows.len())),
        }
    }

    #[test]
    fn single_seed_comparison_equals_run() {
        let spec = MlpSpec::new(vec![2, 5, 2], Activation::Tanh, OutputKind::Softmax).unwrap();
        let data = two_moons(60, 0.1, 2).unwrap();
        let cfg = TrainConfig::new(SchemeKind::Multi, 4, 16, 9);
        let table =
            run_scheme_comparison(&spec, &data, &data, &cfg, &[SchemeKind::Multi], &[9]).unwrap();
        let run = train(&spec, &data, &data, &cfg).unwrap();
        let b = &table.blocks[0];
        assert_eq!(b.trajectories[0], run);
        for (e, row) in run.rows.iter().enumerate() {
            assert_eq!(b.mean_train_acc[e], row.train_acc);
            assert_eq!(b.std_val_acc[e], 0.0);
        }
    }
}
