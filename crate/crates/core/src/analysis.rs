//! Grid quadrature over low-dimensional loss landscapes: Boltzmann
//! densities, KL distances between scheme objectives, generalized entropy
//! and weight-space sharpness.
//!
//! Partition functions are always evaluated in log space with max-shifting.
//! Sums run in a fixed grid order, so results do not depend on scheduling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::{composite_value, BetaWeights, CompositeError, CompositeMode};
use crate::data::Dataset;
use crate::losses::{loss_output_grad, loss_value, LossError, LossKind};
use crate::netcore::{backward, forward, MlpSpec, NetError, ParamVector};

pub const NORMALIZATION_TOL: f64 = 1e-9;
pub const MAX_GRID_POINTS: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("field has {got} values, grid has {expected} points")]
    FieldSize { expected: usize, got: usize },
    #[error("non-finite field value at point {0}")]
    NonFinite(usize),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("partition function underflow (log Z = {0}); shift the field by its minimum")]
    Underflow(f64),
    #[error("support violation at point {0}: Q = 0 where P > 0")]
    Support(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

type Result<T> = std::result::Result<T, AnalysisError>;

/// Cell-centered rectangular grid in one or two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    bounds: Vec<(f64, f64)>,
    resolution: Vec<usize>,
}

impl Grid {
    pub fn new(bounds: Vec<(f64, f64)>, resolution: Vec<usize>) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 || bounds.len() != resolution.len() {
            return Err(AnalysisError::Grid(
                "need 1 or 2 dimensions with matching resolutions".into(),
            ));
        }
        for (&(lo, hi), &n) in bounds.iter().zip(&resolution) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(AnalysisError::Grid(format!("bounds ({lo}, {hi}) must satisfy lo < hi")));
            }
            if n < 3 {
                return Err(AnalysisError::Grid(format!("resolution {n} below 3")));
            }
        }
        let total = resolution.iter().try_fold(1usize, |a, &n| a.checked_mul(n));
        match total {
            Some(t) if t <= MAX_GRID_POINTS => Ok(Self { bounds, resolution }),
            _ => Err(AnalysisError::Grid("more than 1e7 points".into())),
        }
    }

    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![(lo, hi)], vec![n])
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn step(&self, d: usize) -> f64 {
        let (lo, hi) = self.bounds[d];
        (hi - lo) / self.resolution[d] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dims()).map(|d| self.step(d)).product()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }

    /// Coordinates of point `i`; the last dimension varies fastest.
    pub fn point(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims()];
        let mut rem = i;
        for d in (0..self.dims()).rev() {
            let n = self.resolution[d];
            let k = rem % n;
            rem /= n;
            out[d] = self.bounds[d].0 + (k as f64 + 0.5) * self.step(d);
        }
        out
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(AnalysisError::FieldSize {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: &Grid, f: F) -> Result<Self> {
        let values = grid.points().map(|x| f(&x)).collect();
        Self::new(grid.clone(), values)
    }

    /// Pointwise combination of same-grid fields.
    pub fn zip_with<F>(fields: &[&GridField], f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> std::result::Result<f64, CompositeError>,
    {
        let first = fields
            .first()
            .ok_or_else(|| AnalysisError::InvalidArgument("no fields".into()))?;
        if fields.iter().any(|g| g.grid != first.grid) {
            return Err(AnalysisError::GridMismatch);
        }
        let mut buf = vec![0.0; fields.len()];
        let mut values = Vec::with_capacity(first.values.len());
        for i in 0..first.values.len() {
            for (b, g) in buf.iter_mut().zip(fields) {
                *b = g.values[i];
            }
            values.push(f(&buf)?);
        }
        Self::new(first.grid.clone(), values)
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn is_density(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0) && (self.integral() - 1.0).abs() <= NORMALIZATION_TOL
    }

    /// Number of points outside the open unit interval.
    pub fn outside_unit_interval(&self) -> usize {
        self.values.iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count()
    }
}

/// `log ∫ exp(−β f)` over the grid, max-shifted.
pub fn log_partition(field: &GridField, beta: f64) -> Result<f64> {
    let shift = field
        .values
        .iter()
        .map(|v| -beta * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = field.values.iter().map(|v| (-beta * v - shift).exp()).sum();
    let log_z = shift + s.ln() + field.grid.cell_volume().ln();
    if !log_z.is_finite() {
        return Err(AnalysisError::Underflow(log_z));
    }
    Ok(log_z)
}

/// Density `exp(−β f) / Z` and `log Z`.
pub fn boltzmann(field: &GridField, beta: f64) -> Result<(GridField, f64)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(AnalysisError::InvalidArgument(format!("beta {beta} must be positive")));
    }
    let log_z = log_partition(field, beta)?;
    let values = field.values.iter().map(|v| (-beta * v - log_z).exp()).collect();
    Ok((GridField::new(field.grid.clone(), values)?, log_z))
}

/// Riemann-sum `KL(P ‖ Q)` of two densities on the same grid.
pub fn kl_divergence(p: &GridField, q: &GridField) -> Result<f64> {
    if p.grid != q.grid {
        return Err(AnalysisError::GridMismatch);
    }
    let mut s = 0.0;
    for (i, (&pi, &qi)) in p.values.iter().zip(&q.values).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(AnalysisError::Support(i));
        }
        s += pi * (pi / qi).ln();
    }
    Ok((s * p.grid.cell_volume()).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLReport {
    pub mode: CompositeMode,
    pub p_list: Vec<f64>,
    pub d_single_1: f64,
    pub d_single_2: f64,
    pub d_multi: f64,
    pub d_non: BTreeMap<String, f64>,
    #[serde(rename = "dD_dp")]
    pub d_d_dp: BTreeMap<String, f64>,
    /// Loss-field points outside (0, 1).
    #[serde(default)]
    pub range_violations: usize,
}

impl KLReport {
    pub fn d_non_at(&self, p: f64) -> Option<f64> {
        self.d_non.get(&p_key(p)).copied()
    }

    /// D_non in `p_list` order.
    pub fn d_non_series(&self) -> Vec<f64> {
        self.p_list.iter().filter_map(|&p| self.d_non_at(p)).collect()
    }

    pub fn multi_beats_singles(&self) -> bool {
        self.d_multi < self.d_single_1.min(self.d_single_2)
    }

    /// Whether D_non never rises by more than `tol` between consecutive p.
    pub fn d_non_non_increasing(&self, tol: f64) -> bool {
        self.d_non_series().windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

pub fn p_key(p: f64) -> String {
    format!("{p}")
}

fn scheme_field(
    l1: &GridField,
    l2: &GridField,
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<GridField> {
    GridField::zip_with(&[l1, l2], |v| composite_value(v, betas, p, mode))
}

fn d_scheme(
    l1: &GridField,
    l2: &GridField,
    p_opt: &GridField,
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<f64> {
    let f = scheme_field(l1, l2, betas, p, mode)?;
    kl_divergence(p_opt, &boltzmann(&f, 1.0)?.0)
}

/// KL distances from `p_opt` to the unit-temperature Boltzmann densities of
/// each single loss, the linear combination and the power mean at every
/// `p`, with central-difference slopes in `p`.
pub fn scheme_kl_report(
    l1: &GridField,
    l2: &GridField,
    p_opt: &GridField,
    betas: &BetaWeights,
    p_list: &[f64],
    mode: CompositeMode,
) -> Result<KLReport> {
    if betas.len() != 2 {
        return Err(AnalysisError::InvalidArgument("two loss fields need two weights".into()));
    }
    if l1.grid != l2.grid || l1.grid != p_opt.grid {
        return Err(AnalysisError::GridMismatch);
    }
    if !p_opt.is_density() {
        return Err(AnalysisError::InvalidArgument("p_opt is not a normalized density".into()));
    }
    if let Some(&p) = p_list.iter().find(|&&p| p.is_nan() || p < 1.0) {
        return Err(CompositeError::PowerBelowOne(p).into());
    }
    let d_single_1 = kl_divergence(p_opt, &boltzmann(l1, 1.0)?.0)?;
    let d_single_2 = kl_divergence(p_opt, &boltzmann(l2, 1.0)?.0)?;
    let d_multi = d_scheme(l1, l2, p_opt, betas, 1.0, mode)?;
    let h = 1e-4;
    let mut d_non = BTreeMap::new();
    let mut d_d_dp = BTreeMap::new();
    for &p in p_list {
        let d = d_scheme(l1, l2, p_opt, betas, p, mode)?;
        let up = d_scheme(l1, l2, p_opt, betas, p + h, mode)?;
        let slope = if p - h >= 1.0 {
            (up - d_scheme(l1, l2, p_opt, betas, p - h, mode)?) / (2.0 * h)
        } else {
            (up - d) / h
        };
        d_non.insert(p_key(p), d);
        d_d_dp.insert(p_key(p), slope);
    }
    Ok(KLReport {
        mode,
        p_list: p_list.to_vec(),
        d_single_1,
        d_single_2,
        d_multi,
        d_non,
        d_d_dp,
        range_violations: l1.outside_unit_interval() + l2.outside_unit_interval(),
    })
}

/// One-dimensional testbed: two clipped quadratics with minima at ±1,
/// values in (0, 1), on 601 points over [−3, 3].
pub fn default_testbed() -> Result<(GridField, GridField, GridField)> {
    let grid = Grid::line(-3.0, 3.0, 601)?;
    let l1 = GridField::from_fn(&grid, |x| (0.05 + 0.1 * (x[0] - 1.0).powi(2)).min(0.95))?;
    let l2 = GridField::from_fn(&grid, |x| (0.05 + 0.1 * (x[0] + 1.0).powi(2)).min(0.95))?;
    let p_opt = default_p_opt(&l1, &l2)?;
    Ok((l1, l2, p_opt))
}

/// Boltzmann density of the pointwise minimum of two fields at β = 10.
pub fn default_p_opt(l1: &GridField, l2: &GridField) -> Result<GridField> {
    let m = GridField::zip_with(&[l1, l2], |v| Ok(v[0].min(v[1])))?;
    Ok(boltzmann(&m, 10.0)?.0)
}

/// `log ∫ exp(−M_p(L(x)))` by grid quadrature.
pub fn generalized_entropy(
    fields: &[&GridField],
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<f64> {
    if fields.len() != betas.len() {
        return Err(AnalysisError::InvalidArgument("one weight per field".into()));
    }
    let f = GridField::zip_with(fields, |v| composite_value(v, betas, p, mode))?;
    log_partition(&f, 1.0)
}

/// Importance-sampling proposal over the input space.
pub trait Proposal {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn log_density(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformBox {
    pub bounds: Vec<(f64, f64)>,
}

impl Proposal for UniformBox {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let inside = x.iter().zip(&self.bounds).all(|(v, (lo, hi))| v >= lo && v <= hi);
        if inside {
            -self.bounds.iter().map(|(lo, hi)| (hi - lo).ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Diagonal Gaussian proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Proposal for DiagGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| -0.5 * ((v - m) / s).powi(2) - s.ln() - 0.5 * ln_2pi)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub log_z: f64,
    pub std_err: f64,
    pub draws: usize,
    /// Set when the standard error exceeds the requested tolerance.
    pub flagged: bool,
}

pub const MIN_MC_DRAWS: usize = 10_000;

/// Importance-sampling estimate of `log ∫ exp(−M_p(L(x)))`. `losses(x)`
/// returns the loss values at `x`. The standard error of `log Z` comes from
/// the delta method.
#[allow(clippy::too_many_arguments)]
pub fn generalized_entropy_mc<F, P>(
    losses: F,
    proposal: &P,
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
    draws: usize,
    tolerance: f64,
    seed: u64,
) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> Vec<f64>,
    P: Proposal,
{
    if draws < MIN_MC_DRAWS {
        return Err(AnalysisError::InvalidArgument(format!(
            "{draws} draws, at least {MIN_MC_DRAWS} required"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_w = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x = proposal.sample(&mut rng);
        let v = composite_value(&losses(&x), betas, p, mode)?;
        log_w.push(-v - proposal.log_density(&x));
    }
    let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - shift).exp()).collect();
    let n = draws as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std_err = (var / n).sqrt() / mean;
    Ok(McEstimate {
        log_z: shift + mean.ln(),
        std_err,
        draws,
        flagged: !(std_err <= tolerance),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessOptions {
    pub ascent_steps: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Differentiable loss used as the empirical risk.
    pub loss: LossKind,
}

impl Default for SharpnessOptions {
    fn default() -> Self {
        Self {
            ascent_steps: 20,
            restarts: 5,
            seed: 0,
            loss: LossKind::Ce,
        }
    }
}

/// Box-constrained ascent of `risk(w + ν) − risk(w)` over
/// `|ν_i| ≤ α(|w_i| + 1)`, for each `α` in nondecreasing order.
///
/// `risk` returns the value and gradient. Steps are signed gradient moves
/// of `(α/10)(|w_i| + 1)` followed by projection. Restart 0 begins at
/// `ν = 0`, the rest uniformly inside the box. Each `α` also starts from
/// the best perturbation of the previous one, which stays feasible in the
/// larger box, so the profile is nondecreasing.
pub fn sharpness_profile_fn<F>(
    risk: F,
    w: &[f64],
    alphas: &[f64],
    opts: &SharpnessOptions,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(AnalysisError::InvalidArgument("alpha must be nonnegative".into()));
    }
    if alphas.windows(2).any(|a| a[1] < a[0]) {
        return Err(AnalysisError::InvalidArgument("alphas must be nondecreasing".into()));
    }
    let (base, _) = risk(w)?;
    let scale: Vec<f64> = w.iter().map(|v| v.abs() + 1.0).collect();
    let mut best_nu = vec![0.0; w.len()];
    let mut best = 0.0f64;
    let mut out = Vec::with_capacity(alphas.len());
    let mut x = vec![0.0; w.len()];
    for &alpha in alphas {
        if alpha == 0.0 {
            out.push(best);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut starts = vec![best_nu.clone()];
        if best_nu.iter().any(|&v| v != 0.0) {
            starts.push(vec![0.0; w.len()]);
        }
        for _ in 1..opts.restarts.max(1) {
            starts.push(scale.iter().map(|s| alpha * s * rng.random_range(-1.0..=1.0)).collect());
        }
        for mut nu in starts {
            for _ in 0..=opts.ascent_steps {
                for ((xi, wi), ni) in x.iter_mut().zip(w).zip(&nu) {
                    *xi = wi + ni;
                }
                let (r, g) = risk(&x)?;
                if r.is_finite() && r - base > best {
                    best = r - base;
                    best_nu.copy_from_slice(&nu);
                }
                for ((ni, gi), s) in nu.iter_mut().zip(&g).zip(&scale) {
                    let step = alpha / 10.0 * s;
                    *ni = (*ni + step * gi.signum()).clamp(-alpha * s, alpha * s);
                }
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn mlp_risk<'a>(
    spec: &'a MlpSpec,
    data: &'a Dataset,
    loss: LossKind,
) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a {
    move |w: &[f64]| {
        let params = ParamVector(w.to_vec());
        let pred = forward(spec, &params, &data.inputs)?;
        let value = loss_value(loss, &pred, &data.targets)?.value;
        let og = loss_output_grad(loss, &pred, &data.targets)?;
        let g = backward(spec, &params, &data.inputs, &og)?;
        Ok((value, g.0))
    }
}

/// Sharpness of a network's empirical risk at each `α`.
pub fn sharpness_profile(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    alphas: &[f64],
    opts: &SharpnessOptions,
) -> Result<Vec<f64>> {
    sharpness_profile_fn(mlp_risk(spec, data, opts.loss), params.as_slice(), alphas, opts)
}

pub fn sharpness(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    alpha: f64,
    opts: &SharpnessOptions,
) -> Result<f64> {
    Ok(sharpness_profile(spec, params, data, &[alpha], opts)?[0])
}

/// Slack `4 √((KL + ln(2m/δ)) / m)` of the expected-sharpness bound.
pub fn expected_sharpness_bound(kl_term: f64, m: usize, delta: f64) -> Result<f64> {
    if !(kl_term >= 0.0) || m == 0 || !(delta > 0.0 && delta <= 1.0) {
        return Err(AnalysisError::InvalidArgument(format!(
            "need kl ≥ 0, m ≥ 1, δ in (0, 1]; got {kl_term}, {m}, {delta}"
        )));
    }
    let m = m as f64;
    Ok(4.0 * ((kl_term + (2.0 * m / delta).ln()) / m).sqrt())
}
