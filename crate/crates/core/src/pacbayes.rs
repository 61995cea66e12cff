//! PAC-Bayes risk bounds for isotropic Gaussian posteriors over network
//! weights, Bernoulli KL inversion and bundled risk certificates.
//!
//! All logarithms are natural.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::losses::{loss_value, LossError, LossKind};
use crate::netcore::{forward, MlpSpec, NetError, ParamVector};

#[derive(Debug, Error, PartialEq)]
pub enum PacBayesError {
    #[error(
        "lambda = {0} is outside the linear PAC-Bayes bound regime (requires lambda > 1/2)"
    )]
    LambdaRegime(f64),
    #[error("invalid bound parameter: {0}")]
    InvalidParam(String),
    #[error("dimension mismatch: posterior {posterior}, prior {prior}")]
    Dimension { posterior: usize, prior: usize },
    #[error("sample count must be positive")]
    NoSamples,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

type Result<T> = std::result::Result<T, PacBayesError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: ParamVector,
    pub sigma: f64,
}

impl GaussianPosterior {
    pub fn new(mean: ParamVector, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(PacBayesError::InvalidParam(format!("sigma {sigma} must be positive")));
        }
        Ok(Self { mean, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> ParamVector {
        ParamVector(
            self.mean
                .as_slice()
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + self.sigma * z
                })
                .collect(),
        )
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        iso_log_density(self.mean.as_slice(), self.sigma, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: ParamVector,
    pub lambda_p: f64,
}

impl GaussianPrior {
    pub fn new(mean: ParamVector, lambda_p: f64) -> Result<Self> {
        if !(lambda_p > 0.0) || !lambda_p.is_finite() {
            return Err(PacBayesError::InvalidParam(format!(
                "prior std {lambda_p} must be positive"
            )));
        }
        Ok(Self { mean, lambda_p })
    }

    /// Zero-mean prior.
    pub fn centered(dim: usize, lambda_p: f64) -> Result<Self> {
        Self::new(ParamVector::zeros(dim), lambda_p)
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        iso_log_density(self.mean.as_slice(), self.lambda_p, w)
    }
}

fn iso_log_density(mean: &[f64], s: f64, w: &[f64]) -> f64 {
    let d = mean.len() as f64;
    let sq: f64 = w.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
    -0.5 * sq / (s * s) - d * s.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub lambda: f64,
    pub l_max: f64,
    pub delta: f64,
    pub m: usize,
    pub eps_dp: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.5) {
            return Err(PacBayesError::LambdaRegime(self.lambda));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.l_max > 0.0) {
            return Err(PacBayesError::InvalidParam(format!("l_max {} must be positive", self.l_max)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(PacBayesError::InvalidParam(format!("delta {} not in (0, 1)", self.delta)));
        }
        if self.m < 2 {
            return Err(PacBayesError::InvalidParam(format!("m = {} below 2", self.m)));
        }
        if !(self.eps_dp >= 0.0) {
            return Err(PacBayesError::InvalidParam(format!("eps_dp {} negative", self.eps_dp)));
        }
        Ok(())
    }
}

/// `KL(Q ‖ P)` for isotropic Gaussians.
pub fn kl_gaussians(q: &GaussianPosterior, p: &GaussianPrior) -> Result<f64> {
    if q.dim() != p.mean.len() {
        return Err(PacBayesError::Dimension {
            posterior: q.dim(),
            prior: p.mean.len(),
        });
    }
    let d = q.dim() as f64;
    let lp2 = p.lambda_p * p.lambda_p;
    let sq: f64 = q
        .mean
        .as_slice()
        .iter()
        .zip(p.mean.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let kl = d * ((p.lambda_p / q.sigma).ln() + q.sigma * q.sigma / (2.0 * lp2) - 0.5) + sq / (2.0 * lp2);
    Ok(kl.max(0.0))
}

/// Monte Carlo estimate of `E_Q[ln q(w) − ln p(w)]` with its standard error.
pub fn kl_gaussians_mc(
    q: &GaussianPosterior,
    p: &GaussianPrior,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if q.dim() != p.mean.len() {
        return Err(PacBayesError::Dimension {
            posterior: q.dim(),
            prior: p.mean.len(),
        });
    }
    if draws < 2 {
        return Err(PacBayesError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            let w = q.sample(&mut rng);
            q.log_density(w.as_slice()) - p.log_density(w.as_slice())
        })
        .collect();
    Ok(mean_se(&xs))
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_samples: usize,
}

/// Average dataset loss over `n_samples` weight draws from `Q`.
pub fn empirical_risk(
    q: &GaussianPosterior,
    spec: &MlpSpec,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
    loss: LossKind,
) -> Result<RiskEstimate> {
    if n_samples == 0 {
        return Err(PacBayesError::NoSamples);
    }
    if q.dim() != spec.param_count() {
        return Err(PacBayesError::Dimension {
            posterior: q.dim(),
            prior: spec.param_count(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let w = q.sample(&mut rng);
        let pred = forward(spec, &w, &data.inputs)?;
        vals.push(loss_value(loss, &pred, &data.targets)?.value);
    }
    let (mean, std_err) = mean_se(&vals);
    Ok(RiskEstimate {
        mean,
        std_err,
        n_samples,
    })
}

/// `[R̂ + (λ L_max / m)(KL + ln(1/δ))] / (1 − 1/(2λ))`.
pub fn linear_pac_bound(emp_risk: f64, kl: f64, params: &BoundParams) -> Result<f64> {
    params.validate()?;
    if !(kl >= 0.0) {
        return Err(PacBayesError::InvalidParam(format!("kl {kl} negative")));
    }
    let BoundParams {
        lambda, l_max, delta, m, ..
    } = *params;
    let penalty = lambda * l_max / m as f64 * (kl + (1.0 / delta).ln());
    Ok((emp_risk + penalty) / (1.0 - 1.0 / (2.0 * lambda)))
}

/// Bound on `kl(R̂ ‖ R)` with an ε-differentially private prior:
/// `(KL + ln 2m + 2 max{ln(3/δ), m ε²}) / (m − 1)`.
pub fn dp_pac_bound(kl: f64, params: &BoundParams) -> Result<f64> {
    params.validate_common()?;
    if !(kl >= 0.0) {
        return Err(PacBayesError::InvalidParam(format!("kl {kl} negative")));
    }
    let m = params.m as f64;
    let budget = (3.0 / params.delta).ln().max(m * params.eps_dp * params.eps_dp);
    Ok((kl + (2.0 * m).ln() + 2.0 * budget) / (m - 1.0))
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// `kl(q ‖ p)` between Bernoulli distributions, with `0 ln 0 = 0`.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let v = xlogy_ratio(q, p) + xlogy_ratio(1.0 - q, 1.0 - p);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v.max(0.0)
    }
}

/// Largest `p ≥ q` with `kl(q ‖ p) ≤ c`, by bisection.
pub fn kl_inverse(q: f64, c: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    if !(c > 0.0) || q >= 1.0 {
        return q;
    }
    let (mut lo, mut hi) = (q, 1.0);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if bernoulli_kl(q, mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCertificate {
    pub emp_risk: f64,
    pub emp_se: f64,
    pub kl_q_p: f64,
    pub m: usize,
    pub delta: f64,
    pub eps_dp: f64,
    pub dp_bound: f64,
    pub risk_upper: f64,
}

/// Zero-one empirical risk of `Q`, `KL(Q ‖ P)`, the private-prior bound and
/// its inversion into an upper bound on the true risk.
pub fn risk_certificate(
    q: &GaussianPosterior,
    p: &GaussianPrior,
    spec: &MlpSpec,
    data: &Dataset,
    params: &BoundParams,
    n_samples: usize,
    seed: u64,
) -> Result<RiskCertificate> {
    params.validate_common()?;
    let risk = empirical_risk(q, spec, data, n_samples, seed, LossKind::ZeroOne)?;
    let kl = kl_gaussians(q, p)?;
    let dp_bound = dp_pac_bound(kl, params)?;
    Ok(RiskCertificate {
        emp_risk: risk.mean,
        emp_se: risk.std_err,
        kl_q_p: kl,
        m: params.m,
        delta: params.delta,
        eps_dp: params.eps_dp,
        dp_bound,
        risk_upper: kl_inverse(risk.mean, dp_bound),
    })
}
