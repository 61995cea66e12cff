//! Power-mean composition of several losses.
//!
//! For loss values `v_m > 0`, weights `β_m` on the simplex and power
//! `p ≥ 1` the weighted objective is
//!
//! ```text
//! L = (Σ β_m v_m^p)^(1/p)
//! ∇L = M^(1/p − 1) · Σ β_m v_m^(p−1) ∇v_m,      M = Σ β_m v_m^p
//! ```
//!
//! The unweighted-norm mode drops the weights from the value,
//! `(Σ v_m^p)^(1/p)`, which is the ℓ_p norm of the loss vector. The two
//! forms move in opposite directions as `p` grows (the weighted power mean
//! increases, the ℓ_p norm decreases), so both are exposed.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::ParamVector;

/// Values are clamped below at this floor before exponentiation.
pub const VALUE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompositeError {
    #[error("power p = {0} is below 1")]
    PowerBelowOne(f64),
    #[error("expected {expected} entries, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("no loss terms given")]
    Empty,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("max-first weighting is defined for exactly two terms, got {0}")]
    MaxFirstArity(usize),
    #[error("undefined critical power: first derivative is zero")]
    UndefinedCriticalPower,
    #[error("direction must be a unit vector (norm {0})")]
    NotUnitDirection(f64),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Simplex weights of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BetaWeights(Vec<f64>);

impl BetaWeights {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(betas: Vec<f64>) -> Result<Self, CompositeError> {
        if betas.is_empty() {
            return Err(CompositeError::Empty);
        }
        if betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(CompositeError::InvalidWeights(format!(
                "weights must be finite and nonnegative: {betas:?}"
            )));
        }
        let sum: f64 = betas.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(CompositeError::InvalidWeights(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self(betas))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut b = vec![0.0; n];
        b[index] = 1.0;
        Self(b)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for BetaWeights {
    type Error = CompositeError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BetaWeights> for Vec<f64> {
    fn from(b: BetaWeights) -> Self {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CompositeMode {
    /// `(Σ β_m v_m^p)^(1/p)`
    #[default]
    Weighted,
    /// `(Σ v_m^p)^(1/p)`
    UnweightedNorm,
}

/// Training scheme: one loss, the linear combination, or the power mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Single(usize),
    Multi,
    Nonlinear(f64),
}

impl SchemeKind {
    pub fn power(&self) -> f64 {
        match self {
            SchemeKind::Single(_) | SchemeKind::Multi => 1.0,
            SchemeKind::Nonlinear(p) => *p,
        }
    }

    pub fn label(&self) -> String {
        match self {
            SchemeKind::Single(m) => format!("single-{m}"),
            SchemeKind::Multi => "multi".to_string(),
            SchemeKind::Nonlinear(p) => format!("nonlinear-p{p}"),
        }
    }
}

/// Full objective description: terms are identified by index into the
/// caller's loss list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeObjective {
    pub betas: BetaWeights,
    pub p: f64,
    pub mode: CompositeMode,
}

impl CompositeObjective {
    pub fn new(betas: BetaWeights, p: f64, mode: CompositeMode) -> Result<Self, CompositeError> {
        check_power(p)?;
        Ok(Self { betas, p, mode })
    }

    pub fn value(&self, values: &[f64]) -> Result<f64, CompositeError> {
        composite_value(values, &self.betas, self.p, self.mode)
    }

    pub fn grad(&self, values: &[f64], grads: &[&[f64]]) -> Result<Vec<f64>, CompositeError> {
        composite_grad(values, grads, &self.betas, self.p, self.mode)
    }
}

fn check_power(p: f64) -> Result<(), CompositeError> {
    if p.is_nan() || p < 1.0 {
        return Err(CompositeError::PowerBelowOne(p));
    }
    Ok(())
}

fn check_values(values: &[f64], betas: &BetaWeights) -> Result<(), CompositeError> {
    if values.is_empty() {
        return Err(CompositeError::Empty);
    }
    if values.len() != betas.len() {
        return Err(CompositeError::Length {
            expected: betas.len(),
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CompositeError::NonFinite("loss value"));
    }
    Ok(())
}

#[inline]
fn floor(v: f64) -> f64 {
    v.max(VALUE_FLOOR)
}

/// Effective weight of term `m` in the given mode.
#[inline]
fn weight(betas: &BetaWeights, mode: CompositeMode, m: usize) -> f64 {
    match mode {
        CompositeMode::Weighted => betas.0[m],
        CompositeMode::UnweightedNorm => 1.0,
    }
}

/// `M = Σ w_m v_m^p` for the given mode.
fn power_sum(values: &[f64], betas: &BetaWeights, p: f64, mode: CompositeMode) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(m, &v)| weight(betas, mode, m) * floor(v).powf(p))
        .sum()
}

pub fn composite_value(
    values: &[f64],
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<f64, CompositeError> {
    check_power(p)?;
    check_values(values, betas)?;
    if p == 1.0 {
        return Ok(values
            .iter()
            .enumerate()
            .map(|(m, &v)| weight(betas, mode, m) * floor(v))
            .sum());
    }
    // a single active term needs no round trip through powf
    if mode == CompositeMode::Weighted {
        if let Some(m) = betas.0.iter().position(|&b| b == 1.0) {
            return Ok(floor(values[m]));
        }
    }
    Ok(power_sum(values, betas, p, mode).powf(1.0 / p))
}

pub fn composite_grad(
    values: &[f64],
    grads: &[&[f64]],
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<Vec<f64>, CompositeError> {
    check_power(p)?;
    check_values(values, betas)?;
    if grads.len() != values.len() {
        return Err(CompositeError::Length {
            expected: values.len(),
            got: grads.len(),
        });
    }
    let dim = grads[0].len();
    if let Some(bad) = grads.iter().find(|g| g.len() != dim) {
        return Err(CompositeError::Length {
            expected: dim,
            got: bad.len(),
        });
    }
    // coefficient of ∇v_m
    let coeffs: Vec<f64> = if p == 1.0 {
        (0..values.len()).map(|m| weight(betas, mode, m)).collect()
    } else {
        let total = power_sum(values, betas, p, mode);
        let outer = total.powf(1.0 / p - 1.0);
        values
            .iter()
            .enumerate()
            .map(|(m, &v)| outer * weight(betas, mode, m) * floor(v).powf(p - 1.0))
            .collect()
    };
    let mut out = vec![0.0; dim];
    for (c, g) in coeffs.iter().zip(grads) {
        if *c == 0.0 {
            continue;
        }
        for (o, gv) in out.iter_mut().zip(g.iter()) {
            *o += c * gv;
        }
    }
    if let Some(i) = mutation::grad_sign_flip() {
        let k = i % dim.max(1);
        if let Some(o) = out.get_mut(k) {
            *o = -*o;
        }
    }
    Ok(out)
}

/// Fault injection for checking that the verification suite notices a
/// corrupted gradient.
#[doc(hidden)]
pub mod mutation {
    use std::sync::atomic::{AtomicUsize, Ordering};

    static GRAD_SIGN_FLIP: AtomicUsize = AtomicUsize::new(usize::MAX);

    /// Negate coordinate `index mod dim` of every composite gradient.
    pub fn set_grad_sign_flip(index: Option<usize>) {
        GRAD_SIGN_FLIP.store(index.unwrap_or(usize::MAX), Ordering::SeqCst);
    }

    pub(crate) fn grad_sign_flip() -> Option<usize> {
        match GRAD_SIGN_FLIP.load(Ordering::Relaxed) {
            usize::MAX => None,
            i => Some(i),
        }
    }
}

/// [`composite_grad`] over [`ParamVector`]s.
pub fn composite_param_grad(
    values: &[f64],
    grads: &[ParamVector],
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<ParamVector, CompositeError> {
    let slices: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    composite_grad(values, &slices, betas, p, mode).map(ParamVector)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    /// `β_m = exp(−‖∇L_m‖) / Σ_k exp(−‖∇L_k‖)`
    #[default]
    Softmax,
    /// Two terms only: `β_1` is the larger of the two softmax weights and
    /// `β_2 = 1 − β_1`, regardless of which term produced it.
    MaxFirst,
    /// Keep the configured initial weights.
    Fixed,
}

/// Adaptive weights from per-term gradient norms.
pub fn adaptive_betas(grad_norms: &[f64], rule: BetaRule) -> Result<BetaWeights, CompositeError> {
    if grad_norms.is_empty() {
        return Err(CompositeError::Empty);
    }
    if grad_norms.iter().any(|g| !g.is_finite()) {
        return Err(CompositeError::NonFinite("gradient norm"));
    }
    let min = grad_norms.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = grad_norms.iter().map(|g| (-(g - min)).exp()).collect();
    let z: f64 = raw.iter().sum();
    let soft: Vec<f64> = raw.iter().map(|r| r / z).collect();
    match rule {
        BetaRule::Softmax | BetaRule::Fixed => Ok(BetaWeights(soft)),
        BetaRule::MaxFirst => {
            if soft.len() != 2 {
                return Err(CompositeError::MaxFirstArity(soft.len()));
            }
            let b1 = soft[0].max(soft[1]);
            Ok(BetaWeights(vec![b1, 1.0 - b1]))
        }
    }
}

/// Exact derivative of [`composite_value`] with respect to `p`.
pub fn dvalue_dp(
    values: &[f64],
    betas: &BetaWeights,
    p: f64,
    mode: CompositeMode,
) -> Result<f64, CompositeError> {
    check_power(p)?;
    check_values(values, betas)?;
    let total = power_sum(values, betas, p, mode);
    let weighted_log: f64 = values
        .iter()
        .enumerate()
        .map(|(m, &v)| {
            let v = floor(v);
            weight(betas, mode, m) * v.powf(p) * v.ln()
        })
        .sum();
    Ok(total.powf(1.0 / p) * (-total.ln() / (p * p) + weighted_log / (p * total)))
}

/// Whether `(p − 1) g² + L h > 0`.
pub fn constraint9_check(loss: f64, g: f64, h: f64, p: f64) -> bool {
    (p - 1.0) * g * g + loss * h > 0.0
}

/// Power at which [`constraint9_check`] changes sign: `1 − L h / g²`.
pub fn critical_p(loss: f64, g: f64, h: f64) -> Result<f64, CompositeError> {
    if g == 0.0 {
        return Err(CompositeError::UndefinedCriticalPower);
    }
    let g2 = g * g;
    Ok((g2 - loss * h) / g2)
}

/// First and second directional derivatives of `f` at `x` along the unit
/// vector `direction`, by central differences with step `h`.
pub fn directional_curvature<F>(
    f: F,
    x: &[f64],
    direction: &[f64],
    h: f64,
) -> Result<(f64, f64), CompositeError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(CompositeError::InvalidStep(h));
    }
    if direction.len() != x.len() {
        return Err(CompositeError::Length {
            expected: x.len(),
            got: direction.len(),
        });
    }
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(CompositeError::NotUnitDirection(norm));
    }
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(direction).map(|(a, d)| a + s * d).collect() };
    let up = f(&shifted(h));
    let mid = f(x);
    let down = f(&shifted(-h));
    if !(up.is_finite() && mid.is_finite() && down.is_finite()) {
        return Err(CompositeError::NonFinite("objective evaluation"));
    }
    Ok(((up - down) / (2.0 * h), (up - 2.0 * mid + down) / (h * h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half() -> BetaWeights {
        BetaWeights::new(vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn weighted_value_examples() {
        let v = composite_value(&[0.2, 0.8], &half(), 2.0, CompositeMode::Weighted).unwrap();
        assert!((v - 0.583095).abs() < 1e-6);
        let lin = composite_value(&[0.2, 0.8], &half(), 1.0, CompositeMode::Weighted).unwrap();
        assert_eq!(lin, 0.5);
        let eq = composite_value(
            &[0.4, 0.4],
            &BetaWeights::new(vec![0.3, 0.7]).unwrap(),
            3.5,
            CompositeMode::Weighted,
        )
        .unwrap();
        assert!((eq - 0.4).abs() < 1e-15);
    }

    #[test]
    fn power_below_one_rejected() {
        assert_eq!(
            composite_value(&[0.2, 0.8], &half(), 0.5, CompositeMode::Weighted),
            Err(CompositeError::PowerBelowOne(0.5))
        );
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(BetaWeights::new(vec![0.5, 0.6]).is_err());
        assert!(BetaWeights::new(vec![1.5, -0.5]).is_err());
        assert!(serde_json::from_str::<BetaWeights>("[0.2, 0.2]").is_err());
    }

    #[test]
    fn grad_example() {
        let g1 = [1.0];
        let g3 = [3.0];
        let g = composite_grad(&[0.5, 0.5], &[&g1, &g3], &half(), 2.0, CompositeMode::Weighted).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grad_linear_reduction_is_exact() {
        let b = BetaWeights::new(vec![0.3, 0.7]).unwrap();
        let g1 = [0.4, -1.2];
        let g2 = [2.5, 0.1];
        let g = composite_grad(&[0.2, 0.9], &[&g1, &g2], &b, 1.0, CompositeMode::Weighted).unwrap();
        assert_eq!(g, vec![0.3 * 0.4 + 0.7 * 2.5, 0.3 * -1.2 + 0.7 * 0.1]);
    }

    #[test]
    fn grad_length_mismatch() {
        let g1 = [1.0, 2.0];
        let g2 = [1.0];
        assert!(matches!(
            composite_grad(&[0.2, 0.3], &[&g1, &g2], &half(), 2.0, CompositeMode::Weighted),
            Err(CompositeError::Length { .. })
        ));
    }

    #[test]
    fn adaptive_softmax_and_max_first() {
        let b = adaptive_betas(&[1.0, 2.0], BetaRule::Softmax).unwrap();
        assert!((b.as_slice()[0] - 0.731059).abs() < 1e-6);
        assert!((b.as_slice()[1] - 0.268941).abs() < 1e-6);
        let eq = adaptive_betas(&[0.7, 0.7, 0.7], BetaRule::Softmax).unwrap();
        assert!(eq.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        for norms in [[1.0, 2.0], [2.0, 1.0]] {
            let b = adaptive_betas(&norms, BetaRule::MaxFirst).unwrap();
            assert!((b.as_slice()[0] - 0.731059).abs() < 1e-6);
            assert!((b.as_slice()[1] - 0.268941).abs() < 1e-6);
        }
        assert_eq!(
            adaptive_betas(&[1.0, 1.0], BetaRule::MaxFirst).unwrap().as_slice(),
            &[0.5, 0.5]
        );
        assert_eq!(
            adaptive_betas(&[1.0, 1.0, 2.0], BetaRule::MaxFirst),
            Err(CompositeError::MaxFirstArity(3))
        );
    }

    #[test]
    fn dvalue_dp_examples() {
        let b = BetaWeights::new(vec![0.3, 0.7]).unwrap();
        let d = dvalue_dp(&[0.35, 0.35], &b, 2.5, CompositeMode::Weighted).unwrap();
        assert!(d.abs() < 1e-14);

        let h = 1e-6;
        let f = |p| composite_value(&[0.2, 0.8], &half(), p, CompositeMode::Weighted).unwrap();
        let fd = (f(2.0 + h) - f(2.0 - h)) / (2.0 * h);
        let exact = dvalue_dp(&[0.2, 0.8], &half(), 2.0, CompositeMode::Weighted).unwrap();
        assert!((fd - exact).abs() < 1e-8, "{fd} vs {exact}");

        let un = dvalue_dp(&[0.3, 0.4], &half(), 2.0, CompositeMode::UnweightedNorm).unwrap();
        assert!(un < 0.0);
    }

    #[test]
    fn constraint_and_critical_power() {
        assert!(constraint9_check(0.5, 0.1, -0.02, 3.0));
        assert!(!constraint9_check(0.5, 0.1, -0.02, 1.0));
        assert!(constraint9_check(0.5, 0.3, 0.0, 1.5));
        assert_eq!(critical_p(0.5, 0.1, -0.02).unwrap(), 2.0);
        assert_eq!(critical_p(0.5, 0.1, 0.0).unwrap(), 1.0);
        assert_eq!(critical_p(0.5, 0.0, -0.1), Err(CompositeError::UndefinedCriticalPower));
        let ps = critical_p(0.5, 0.1, -0.02).unwrap();
        assert!(constraint9_check(0.5, 0.1, -0.02, ps + 1e-9));
        assert!(!constraint9_check(0.5, 0.1, -0.02, ps - 1e-9));
    }

    #[test]
    fn directional_curvature_examples() {
        let quad = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
        let (g, h) = directional_curvature(quad, &[1.0, 0.0], &[1.0, 0.0], 1e-4).unwrap();
        assert!((g - 2.0).abs() < 1e-6 && (h - 2.0).abs() < 1e-6);

        let lin = |w: &[f64]| 3.0 * w[0] - 2.0 * w[1] + 1.0;
        let d = [0.6, 0.8];
        let (g, h) = directional_curvature(lin, &[0.3, -0.2], &d, 1e-4).unwrap();
        assert!((g - (3.0 * 0.6 - 2.0 * 0.8)).abs() < 1e-6 && h.abs() < 1e-6);

        let (g, h) = directional_curvature(|w: &[f64]| w[0].sin(), &[0.0], &[1.0], 1e-4).unwrap();
        assert!((g - 1.0).abs() < 1e-6 && h.abs() < 1e-6);

        assert!(directional_curvature(quad, &[0.0, 0.0], &[1.0, 1.0], 1e-4).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, BetaWeights)> {
        (2usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(0.01f64..0.99, n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(v, raw)| {
                    let s: f64 = raw.iter().sum();
                    let mut b: Vec<f64> = raw.iter().map(|r| r / s).collect();
                    let rest: f64 = b[1..].iter().sum();
                    b[0] = 1.0 - rest;
                    (v, BetaWeights::new(b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn weighted_value_bounded_by_extremes((v, b) in instance(), p in 1.0f64..6.0) {
            let c = composite_value(&v, &b, p, CompositeMode::Weighted).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(0.0, f64::max);
            prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
        }

        #[test]
        fn weighted_mean_nondecreasing_norm_nonincreasing((v, b) in instance(), p1 in 1.0f64..4.0, dp in 0.0f64..3.0) {
            let p2 = p1 + dp;
            let w1 = composite_value(&v, &b, p1, CompositeMode::Weighted).unwrap();
            let w2 = composite_value(&v, &b, p2, CompositeMode::Weighted).unwrap();
            prop_assert!(w1 <= w2 + 1e-12);
            let n1 = composite_value(&v, &b, p1, CompositeMode::UnweightedNorm).unwrap();
            let n2 = composite_value(&v, &b, p2, CompositeMode::UnweightedNorm).unwrap();
            prop_assert!(n2 <= n1 + 1e-12);
            prop_assert!(n1 <= v.iter().sum::<f64>() + 1e-12);
        }

        #[test]
        fn betas_on_simplex(norms in prop::collection::vec(0.0f64..50.0, 1..6)) {
            let b = adaptive_betas(&norms, BetaRule::Softmax).unwrap();
            prop_assert!((b.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let imin = norms.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let imax = b.as_slice().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(norms[imin], norms[imax]);
        }

        #[test]
        fn softmax_permutation_equivariant(norms in prop::collection::vec(0.0f64..10.0, 3)) {
            let b = adaptive_betas(&norms, BetaRule::Softmax).unwrap();
            let rev: Vec<f64> = norms.iter().rev().copied().collect();
            let br = adaptive_betas(&rev, BetaRule::Softmax).unwrap();
            for i in 0..3 {
                prop_assert!((b.as_slice()[i] - br.as_slice()[2 - i]).abs() < 1e-15);
            }
        }

        #[test]
        fn max_first_first_weight_dominates(a in 0.0f64..10.0, c in 0.0f64..10.0) {
            let b = adaptive_betas(&[a, c], BetaRule::MaxFirst).unwrap();
            prop_assert!(b.as_slice()[0] >= 0.5);
            prop_assert!((b.as_slice()[0] + b.as_slice()[1] - 1.0).abs() < 1e-15);
        }
    }
}
