//! Individual surrogate losses and their gradients with respect to the
//! network predictions.
//!
//! Predictions with a single column are read as the probability of the
//! positive class (binary head); wider predictions are per-row
//! distributions. Probabilities are clamped to `[η, 1 − η]` with
//! `η = 1e-12` before any logarithm, and [`LossValue::clamped`] reports
//! whether that happened.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::Matrix;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: predictions {pred_rows}x{pred_cols}, targets {target_rows}x{target_cols}")]
    Shape {
        pred_rows: usize,
        pred_cols: usize,
        target_rows: usize,
        target_cols: usize,
    },
    #[error("non-finite {which} at flat index {index}")]
    NonFinite { which: &'static str, index: usize },
    #[error("{0:?} is a non-differentiable surrogate target")]
    NonDifferentiable(LossKind),
    #[error("empty batch")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Ce,
    Jsd,
    /// Misclassification rate; evaluation only.
    ZeroOne,
}

impl LossKind {
    pub fn is_differentiable(self) -> bool {
        !matches!(self, LossKind::ZeroOne)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Ce => "ce",
            LossKind::Jsd => "jsd",
            LossKind::ZeroOne => "zero_one",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
    /// Some prediction had to be clamped into `[η, 1 − η]`.
    pub clamped: bool,
}

impl LossValue {
    /// Whether the value sits in the open unit interval assumed by the
    /// power-mean analysis. Reported, never enforced.
    pub fn in_unit_interval(&self) -> bool {
        self.value > 0.0 && self.value < 1.0
    }
}

fn check_inputs(pred: &Matrix, target: &Matrix) -> Result<(), LossError> {
    if !pred.same_shape(target) {
        return Err(LossError::Shape {
            pred_rows: pred.rows(),
            pred_cols: pred.cols(),
            target_rows: target.rows(),
            target_cols: target.cols(),
        });
    }
    if pred.rows() == 0 {
        return Err(LossError::Empty);
    }
    if let Some(index) = pred.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFinite {
            which: "prediction",
            index,
        });
    }
    if let Some(index) = target.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFinite {
            which: "target",
            index,
        });
    }
    Ok(())
}

#[inline]
fn clamp_prob(v: f64, clamped: &mut bool) -> f64 {
    let c = v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if c != v {
        *clamped = true;
    }
    c
}

/// `x ln(x / y)` with the `0 ln 0 = 0` convention.
#[inline]
fn xlogx_over(x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Jensen–Shannon divergence between two distributions (natural log).
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * xlogx_over(a, m) + 0.5 * xlogx_over(b, m)
        })
        .sum()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Whether the prediction row picks the target class (threshold 0.5 for
/// binary heads, argmax otherwise).
pub fn is_correct(pred: &[f64], target: &[f64]) -> bool {
    if pred.len() == 1 {
        (pred[0] >= 0.5) == (target[0] >= 0.5)
    } else {
        argmax(pred) == argmax(target)
    }
}

pub fn loss_value(kind: LossKind, pred: &Matrix, target: &Matrix) -> Result<LossValue, LossError> {
    check_inputs(pred, target)?;
    let n = pred.rows() as f64;
    let binary = pred.cols() == 1;
    let mut clamped = false;
    let total: f64 = match kind {
        LossKind::Mse => pred
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(f, y)| (f - y) * (f - y))
            .sum(),
        LossKind::Ce => {
            let mut s = 0.0;
            for (pr, tr) in pred.iter_rows().zip(target.iter_rows()) {
                if binary {
                    let f = clamp_prob(pr[0], &mut clamped);
                    let y = tr[0];
                    s -= y * f.ln() + (1.0 - y) * (1.0 - f).ln();
                } else {
                    for (&f, &y) in pr.iter().zip(tr) {
                        if y != 0.0 {
                            s -= y * clamp_prob(f, &mut clamped).ln();
                        }
                    }
                }
            }
            s
        }
        LossKind::Jsd => {
            let mut s = 0.0;
            for (pr, tr) in pred.iter_rows().zip(target.iter_rows()) {
                if binary {
                    let f = clamp_prob(pr[0], &mut clamped);
                    s += jsd(&[tr[0], 1.0 - tr[0]], &[f, 1.0 - f]);
                } else {
                    let q: Vec<f64> = pr.iter().map(|&f| clamp_prob(f, &mut clamped)).collect();
                    s += jsd(tr, &q);
                }
            }
            s
        }
        LossKind::ZeroOne => pred
            .iter_rows()
            .zip(target.iter_rows())
            .filter(|(p, t)| !is_correct(p, t))
            .count() as f64,
    };
    Ok(LossValue {
        value: total / n,
        kind,
        clamped,
    })
}

/// Analytic gradient of [`loss_value`] with respect to the predictions.
/// Clamped coordinates are differentiated at the clamped point.
pub fn loss_output_grad(kind: LossKind, pred: &Matrix, target: &Matrix) -> Result<Matrix, LossError> {
    check_inputs(pred, target)?;
    let n = pred.rows() as f64;
    let binary = pred.cols() == 1;
    let mut ignore = false;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    match kind {
        LossKind::ZeroOne => return Err(LossError::NonDifferentiable(kind)),
        LossKind::Mse => {
            for ((g, f), y) in grad
                .as_mut_slice()
                .iter_mut()
                .zip(pred.as_slice())
                .zip(target.as_slice())
            {
                *g = 2.0 * (f - y) / n;
            }
        }
        LossKind::Ce => {
            for i in 0..pred.rows() {
                let pr = pred.row(i);
                let tr = target.row(i);
                let gr = grad.row_mut(i);
                if binary {
                    let f = clamp_prob(pr[0], &mut ignore);
                    let y = tr[0];
                    gr[0] = -(y / f - (1.0 - y) / (1.0 - f)) / n;
                } else {
                    for j in 0..pr.len() {
                        let f = clamp_prob(pr[j], &mut ignore);
                        gr[j] = -tr[j] / f / n;
                    }
                }
            }
        }
        LossKind::Jsd => {
            // d JSD(p, q) / d q_j = ½ ln(q_j / m_j)
            for i in 0..pred.rows() {
                let pr = pred.row(i);
                let tr = target.row(i);
                let gr = grad.row_mut(i);
                if binary {
                    let f = clamp_prob(pr[0], &mut ignore);
                    let y = tr[0];
                    let m1 = 0.5 * (y + f);
                    let m0 = 0.5 * (2.0 - y - f);
                    gr[0] = 0.5 * ((f / m1).ln() - ((1.0 - f) / m0).ln()) / n;
                } else {
                    for j in 0..pr.len() {
                        let q = clamp_prob(pr[j], &mut ignore);
                        let m = 0.5 * (tr[j] + q);
                        gr[j] = 0.5 * (q / m).ln() / n;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Maps raw loss values onto a common scale before they are combined.
#[derive(Debug, Clone, PartialEq)]
pub enum DimensionUniformizer {
    /// `L̃ = C − L`, the affine transform obtained from the log-Gibbs form.
    Literal { offset: f64 },
    /// Divides by an exponential moving average of the loss's own magnitude.
    ScaleNormalize { decay: f64, ema: Option<f64> },
}

impl Default for DimensionUniformizer {
    fn default() -> Self {
        DimensionUniformizer::Literal { offset: 1.0 }
    }
}

impl DimensionUniformizer {
    pub fn scale_normalize() -> Self {
        DimensionUniformizer::ScaleNormalize {
            decay: 0.99,
            ema: None,
        }
    }

    pub fn uniform_dimension(&mut self, value: LossValue) -> LossValue {
        let v = match self {
            DimensionUniformizer::Literal { offset } => *offset - value.value,
            DimensionUniformizer::ScaleNormalize { decay, ema } => {
                let mag = value.value.abs();
                let next = match *ema {
                    None => mag,
                    Some(prev) => *decay * prev + (1.0 - *decay) * mag,
                };
                *ema = Some(next);
                if next > 0.0 {
                    value.value / next
                } else {
                    0.0
                }
            }
        };
        LossValue { value: v, ..value }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn mse_perfect_fit_is_zero() {
        let p = m(2, 2, &[0.3, 0.7, 0.9, 0.1]);
        assert_eq!(loss_value(LossKind::Mse, &p, &p).unwrap().value, 0.0);
        let g = loss_output_grad(LossKind::Mse, &p, &p).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_ce_at_half() {
        let v = loss_value(LossKind::Ce, &m(1, 1, &[0.5]), &m(1, 1, &[1.0])).unwrap();
        assert!((v.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(!v.clamped);
    }

    #[test]
    fn zero_one_all_correct() {
        let p = m(3, 3, &[0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4]);
        let y = m(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(loss_value(LossKind::ZeroOne, &p, &y).unwrap().value, 0.0);
        let wrong = m(3, 3, &[0., 1., 0., 0., 1., 0., 0., 0., 1.]);
        assert!((loss_value(LossKind::ZeroOne, &p, &wrong).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mse_single_output_gradient() {
        let g = loss_output_grad(LossKind::Mse, &m(1, 1, &[0.9]), &m(1, 1, &[1.0])).unwrap();
        assert!((g.get(0, 0) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_one_gradient_is_rejected() {
        let err = loss_output_grad(LossKind::ZeroOne, &m(1, 2, &[0.4, 0.6]), &m(1, 2, &[0.0, 1.0]))
            .unwrap_err();
        assert!(err.to_string().contains("non-differentiable surrogate target"));
    }

    #[test]
    fn shape_and_finiteness_errors() {
        assert!(matches!(
            loss_value(LossKind::Mse, &m(1, 2, &[0.0, 1.0]), &m(2, 1, &[0.0, 1.0])),
            Err(LossError::Shape { .. })
        ));
        assert!(matches!(
            loss_value(LossKind::Mse, &m(1, 1, &[f64::NAN]), &m(1, 1, &[0.0])),
            Err(LossError::NonFinite { .. })
        ));
    }

    #[test]
    fn clamp_is_reported() {
        let v = loss_value(LossKind::Ce, &m(1, 2, &[0.0, 1.0]), &m(1, 2, &[1.0, 0.0])).unwrap();
        assert!(v.clamped);
        assert!(v.value.is_finite());
    }

    fn fd_check(kind: LossKind, pred: &Matrix, target: &Matrix) {
        let g = loss_output_grad(kind, pred, target).unwrap();
        let h = 1e-6;
        for idx in 0..pred.as_slice().len() {
            let mut up = pred.clone();
            up.as_mut_slice()[idx] += h;
            let mut down = pred.clone();
            down.as_mut_slice()[idx] -= h;
            let fd = (loss_value(kind, &up, target).unwrap().value
                - loss_value(kind, &down, target).unwrap().value)
                / (2.0 * h);
            let a = g.as_slice()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel <= 1e-7, "{kind:?} idx {idx}: analytic {a}, fd {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pred = m(3, 3, &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.25, 0.25, 0.5]);
        let onehot = m(3, 3, &[0., 1., 0., 1., 0., 0., 0., 0., 1.]);
        let soft = m(3, 3, &[0.1, 0.8, 0.1, 0.5, 0.2, 0.3, 0.3, 0.3, 0.4]);
        for kind in [LossKind::Mse, LossKind::Ce, LossKind::Jsd] {
            fd_check(kind, &pred, &onehot);
            fd_check(kind, &pred, &soft);
        }
        let bp = m(3, 1, &[0.3, 0.8, 0.55]);
        let by = m(3, 1, &[1.0, 0.0, 0.4]);
        for kind in [LossKind::Mse, LossKind::Ce, LossKind::Jsd] {
            fd_check(kind, &bp, &by);
        }
    }

    #[test]
    fn uniform_dimension_literal() {
        let mut u = DimensionUniformizer::default();
        let v = LossValue {
            value: 0.3,
            kind: LossKind::Mse,
            clamped: false,
        };
        assert!((u.uniform_dimension(v).value - 0.7).abs() < 1e-15);
        let at_c = LossValue { value: 1.0, ..v };
        assert_eq!(u.uniform_dimension(at_c).value, 0.0);
    }

    #[test]
    fn scale_normalize_converges_to_one() {
        let mut u = DimensionUniformizer::scale_normalize();
        let v = LossValue {
            value: 0.5,
            kind: LossKind::Ce,
            clamped: false,
        };
        let mut last = 0.0;
        for _ in 0..1000 {
            last = u.uniform_dimension(v).value;
        }
        assert!((last - 1.0).abs() < 1e-3);
    }

    fn dist(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4)) {
            let p = dist(&a);
            let q = dist(&b);
            let d1 = jsd(&p, &q);
            let d2 = jsd(&q, &p);
            prop_assert!((d1 - d2).abs() < 1e-14);
            prop_assert!((-1e-15..=std::f64::consts::LN_2 + 1e-15).contains(&d1));
        }

        #[test]
        fn losses_nonnegative(a in prop::collection::vec(0.01f64..1.0, 6), cls in 0usize..3) {
            let pred = Matrix::from_vec(2, 3, [dist(&a[..3]), dist(&a[3..])].concat()).unwrap();
            let mut y = vec![0.0; 6];
            y[cls] = 1.0;
            y[3 + (cls + 1) % 3] = 1.0;
            let target = Matrix::from_vec(2, 3, y).unwrap();
            for kind in [LossKind::Mse, LossKind::Ce, LossKind::Jsd, LossKind::ZeroOne] {
                prop_assert!(loss_value(kind, &pred, &target).unwrap().value >= 0.0);
            }
        }

        #[test]
        fn zero_one_invariant_under_monotone_transform(a in prop::collection::vec(0.01f64..1.0, 9), cls in prop::collection::vec(0usize..3, 3)) {
            let pred = Matrix::from_vec(3, 3, a.clone()).unwrap();
            let transformed = Matrix::from_vec(3, 3, a.iter().map(|v| (3.0 * v).exp() + 2.0).collect()).unwrap();
            let mut y = vec![0.0; 9];
            for (i, c) in cls.iter().enumerate() { y[3 * i + c] = 1.0; }
            let target = Matrix::from_vec(3, 3, y).unwrap();
            let z1 = loss_value(LossKind::ZeroOne, &pred, &target).unwrap().value;
            let z2 = loss_value(LossKind::ZeroOne, &transformed, &target).unwrap().value;
            prop_assert_eq!(z1, z2);
            prop_assert!((0.0..=1.0).contains(&z1));
        }
    }
}
