//! Frequency-domain view of training: the closed-form Fourier transform of
//! a sigmoid unit, residual spectra on a uniform grid and the epoch at
//! which each frequency band of a target is captured.
//!
//! Grids are assumed to span one period of length 2π, so DFT bin `k`
//! corresponds to angular frequency `k`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::SchemeKind;
use crate::data::{freq_target_1d, DataError, Dataset};
use crate::losses::LossKind;
use crate::netcore::{forward, sigmoid, Activation, Matrix, MlpSpec, NetError, OutputKind};
use crate::optim::{train_with_observer, OptimError, OptimizerConfig, OptimizerKind, TrainConfig};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("omega = 0 is a distributional component excluded from the closed form")]
    ZeroFrequency,
    #[error("sigmoid slope a must be nonzero")]
    ZeroSlope,
    #[error("length mismatch: outputs {outputs}, target {target}")]
    Length { outputs: usize, target: usize },
    #[error("invalid band set: {0}")]
    Bands(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, SpectralError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidUnit {
    pub a: f64,
    pub b: f64,
}

impl SigmoidUnit {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a == 0.0 || !a.is_finite() {
            return Err(SpectralError::ZeroSlope);
        }
        Ok(Self { a, b })
    }
}

/// `1 / sinh(x)` without overflow for large `|x|`.
fn csch(x: f64) -> f64 {
    let ax = x.abs();
    let e = (-ax).exp();
    x.signum() * 2.0 * e / -(-2.0 * ax).exp_m1()
}

/// `F[σ(ax + b)](ω) = −(iπ/|a|) e^{ibω/a} / sinh(πω/a)` for `ω ≠ 0`.
pub fn sigmoid_ft(unit: SigmoidUnit, omega: f64) -> Result<Complex64> {
    if unit.a == 0.0 {
        return Err(SpectralError::ZeroSlope);
    }
    if omega == 0.0 {
        return Err(SpectralError::ZeroFrequency);
    }
    let phase = Complex64::from_polar(1.0, unit.b * omega / unit.a);
    let mag = PI / unit.a.abs() * csch(PI * omega / unit.a);
    Ok(Complex64::new(0.0, -mag) * phase)
}

/// `∫ σ′(ax + b) a e^{−iωx} dx` over `[−half_width, half_width]` by
/// composite Simpson with `n` (even) intervals.
pub fn sigmoid_derivative_ft_quadrature(
    unit: SigmoidUnit,
    omega: f64,
    half_width: f64,
    n: usize,
) -> Result<Complex64> {
    if n < 2 || !n.is_multiple_of(2) || !(half_width > 0.0) {
        return Err(SpectralError::InvalidArgument(
            "need an even interval count and a positive window".into(),
        ));
    }
    let h = 2.0 * half_width / n as f64;
    let f = |x: f64| {
        let s = sigmoid(unit.a * x + unit.b);
        let d = unit.a * s * (1.0 - s);
        Complex64::from_polar(d, -omega * x)
    };
    let mut acc = f(-half_width) + f(half_width);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += f(-half_width + i as f64 * h) * w;
    }
    Ok(acc * (h / 3.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSample {
    /// Angular frequencies in increasing order (`−n/2 ..= (n−1)/2`).
    pub omegas: Vec<f64>,
    pub values: Vec<Complex64>,
}

impl SpectrumSample {
    /// Energy at bins with `lo ≤ |ω| ≤ hi`.
    pub fn energy_in(&self, lo: f64, hi: f64) -> f64 {
        self.omegas
            .iter()
            .zip(&self.values)
            .filter(|(w, _)| w.abs() >= lo && w.abs() <= hi)
            .map(|(_, v)| v.norm_sqr())
            .sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }
}

fn dft(signal: &[f64]) -> SpectrumSample {
    let n = signal.len();
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let freq = |j: usize| if j <= (n - 1) / 2 { j as f64 } else { j as f64 - n as f64 };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| freq(a).total_cmp(&freq(b)));
    SpectrumSample {
        omegas: idx.iter().map(|&j| freq(j)).collect(),
        values: idx.iter().map(|&j| buf[j]).collect(),
    }
}

/// DFT of `outputs − target`.
pub fn residual_spectrum(outputs: &[f64], target: &[f64]) -> Result<SpectrumSample> {
    if outputs.len() != target.len() || outputs.is_empty() {
        return Err(SpectralError::Length {
            outputs: outputs.len(),
            target: target.len(),
        });
    }
    let r: Vec<f64> = outputs.iter().zip(target).map(|(o, t)| o - t).collect();
    Ok(dft(&r))
}

/// Closed intervals of `|ω|`.
pub type Band = (f64, f64);

/// Bands of ±1 bin around each tone, excluding DC and any bin not strictly
/// closer to its own tone than to another.
pub fn default_bands(tones: &[f64]) -> Vec<Band> {
    let mut sorted: Vec<f64> = tones.iter().map(|t| t.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    sorted
        .iter()
        .map(|&k| {
            let owns = |j: f64| j >= 1.0 && sorted.iter().all(|&o| o == k || (j - k).abs() < (j - o).abs());
            let lo = if owns(k - 1.0) { k - 1.0 } else { k };
            let hi = if owns(k + 1.0) { k + 1.0 } else { k };
            (lo, hi)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyCaptureReport {
    pub bands: Vec<Band>,
    pub threshold: f64,
    /// `rel_error[epoch][band]`; `None` for bands without target energy
    /// (below 1e-12 of the total).
    pub rel_error: Vec<Vec<Option<f64>>>,
    pub capture_epoch: Vec<Option<usize>>,
    pub flagged: Vec<bool>,
}

impl FrequencyCaptureReport {
    /// Capture epoch with absence mapped to `+∞`.
    pub fn capture_or_inf(&self, band: usize) -> f64 {
        self.capture_epoch[band].map_or(f64::INFINITY, |e| e as f64)
    }

    pub fn lowest_band(&self) -> usize {
        (0..self.bands.len())
            .min_by(|&a, &b| self.bands[a].0.total_cmp(&self.bands[b].0))
            .unwrap_or(0)
    }

    pub fn highest_band(&self) -> usize {
        (0..self.bands.len())
            .max_by(|&a, &b| self.bands[a].0.total_cmp(&self.bands[b].0))
            .unwrap_or(0)
    }

    /// Lowest band captured, and no later than the highest band.
    pub fn low_before_high(&self) -> bool {
        let lo = self.capture_or_inf(self.lowest_band());
        lo.is_finite() && lo <= self.capture_or_inf(self.highest_band())
    }
}

fn check_bands(bands: &[Band], n: usize) -> Result<()> {
    if bands.is_empty() {
        return Err(SpectralError::Bands("no bands".into()));
    }
    let nyquist = (n / 2) as f64;
    for &(lo, hi) in bands {
        if !(lo >= 0.0 && lo <= hi && hi <= nyquist) {
            return Err(SpectralError::Bands(format!("({lo}, {hi}) outside [0, {nyquist}]")));
        }
    }
    let mut s = bands.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    if s.windows(2).any(|w| w[1].0 <= w[0].1) {
        return Err(SpectralError::Bands("bands overlap".into()));
    }
    Ok(())
}

/// Per-epoch band residual energy relative to band target energy, and the
/// first epoch at which it falls strictly below `threshold`.
pub fn frequency_capture(
    outputs: &[Vec<f64>],
    target: &[f64],
    bands: &[Band],
    threshold: f64,
) -> Result<FrequencyCaptureReport> {
    if outputs.is_empty() {
        return Err(SpectralError::InvalidArgument("no epochs recorded".into()));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(SpectralError::InvalidArgument(format!("threshold {threshold} outside [0, 1)")));
    }
    check_bands(bands, target.len())?;
    let t_spec = dft(target);
    let t_energy: Vec<f64> = bands.iter().map(|&(lo, hi)| t_spec.energy_in(lo, hi)).collect();
    let floor = 1e-12 * t_spec.total_energy();
    let flagged: Vec<bool> = t_energy.iter().map(|&e| !(e > floor)).collect();
    let mut rel_error = Vec::with_capacity(outputs.len());
    let mut capture_epoch = vec![None; bands.len()];
    for (epoch, out) in outputs.iter().enumerate() {
        let r = residual_spectrum(out, target)?;
        let row: Vec<Option<f64>> = bands
            .iter()
            .zip(&t_energy)
            .zip(&flagged)
            .map(|((&(lo, hi), &te), &f)| (!f).then(|| r.energy_in(lo, hi) / te))
            .collect();
        for (b, e) in row.iter().enumerate() {
            if let (None, Some(v)) = (capture_epoch[b], e) {
                if *v < threshold {
                    capture_epoch[b] = Some(epoch);
                }
            }
        }
        rel_error.push(row);
    }
    Ok(FrequencyCaptureReport {
        bands: bands.to_vec(),
        threshold,
        rel_error,
        capture_epoch,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub tones: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub n_points: usize,
    pub width: usize,
    pub threshold: f64,
    /// Scheme, epochs and seed come from here; the scheme is overridden
    /// per comparison entry.
    pub train: TrainConfig,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        let mut train = TrainConfig::new(SchemeKind::Multi, 1500, 256, 1);
        train.terms = vec![LossKind::Ce, LossKind::Mse];
        train.optimizer = OptimizerConfig::new(OptimizerKind::Adam, 0.01);
        train.warmup_epochs = 0;
        train.init_scale = 3.0;
        train.track_constraint9 = false;
        Self {
            tones: vec![1.0, 3.0, 5.0],
            amplitudes: vec![1.0, 1.0, 1.0],
            n_points: 256,
            width: 200,
            threshold: 0.2,
            train,
        }
    }
}

/// Regression target on the 2π grid, affinely mapped into `[0.1, 0.9]`
/// about 0.5 so that a sigmoid head fits it under every loss term.
pub fn spectral_dataset(cfg: &SpectralConfig) -> Result<Dataset> {
    let mut d = freq_target_1d(&cfg.tones, &cfg.amplitudes, cfg.n_points)?;
    let peak = d
        .targets
        .as_slice()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let s = if peak > 0.0 { 0.4 / peak } else { 0.0 };
    for v in d.targets.as_mut_slice() {
        *v = 0.5 + s * *v;
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpectrum {
    pub scheme: SchemeKind,
    pub report: FrequencyCaptureReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub seed: u64,
    pub blocks: Vec<SchemeSpectrum>,
}

impl SpectralReport {
    /// Columns: scheme, epoch, band_lo, band_hi, rel_error.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,epoch,band_lo,band_hi,rel_error\n");
        for b in &self.blocks {
            for (epoch, row) in b.report.rel_error.iter().enumerate() {
                for (&(lo, hi), e) in b.report.bands.iter().zip(row) {
                    let e = e.map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(out, "{},{epoch},{lo},{hi},{e}", b.scheme.label());
                }
            }
        }
        out
    }

    /// Capture epochs per scheme and band.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut schemes = BTreeMap::new();
        for b in &self.blocks {
            let bands: Vec<serde_json::Value> = b
                .report
                .bands
                .iter()
                .zip(&b.report.capture_epoch)
                .map(|(&(lo, hi), c)| serde_json::json!({ "band": [lo, hi], "capture_epoch": c }))
                .collect();
            schemes.insert(b.scheme.label(), bands);
        }
        serde_json::json!({
            "seed": self.seed,
            "threshold": self.blocks.first().map(|b| b.report.threshold),
            "schemes": schemes,
        })
    }
}

/// Trains a one-hidden-layer sigmoid network per scheme on the tone target
/// and reports band capture epochs side by side.
pub fn spectral_scheme_compare(
    cfg: &SpectralConfig,
    schemes: &[SchemeKind],
    seed: u64,
) -> Result<SpectralReport> {
    if schemes.is_empty() {
        return Err(SpectralError::InvalidArgument("no schemes".into()));
    }
    let data = spectral_dataset(cfg)?;
    let spec = MlpSpec::new(vec![1, cfg.width, 1], Activation::Sigmoid, OutputKind::Sigmoid)?;
    let bands = default_bands(&cfg.tones);
    let target = data.targets.as_slice().to_vec();
    let blocks = schemes
        .par_iter()
        .map(|&scheme| {
            let train_cfg = TrainConfig {
                scheme,
                seed,
                ..cfg.train.clone()
            };
            let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(train_cfg.epochs);
            let mut fail: Option<NetError> = None;
            train_with_observer(&spec, &data, &data, &train_cfg, |_, params| {
                match forward(&spec, params, &data.inputs) {
                    Ok(m) => outputs.push(m.into_vec()),
                    Err(e) => fail = fail.take().or(Some(e)),
                }
            })?;
            if let Some(e) = fail {
                return Err(e.into());
            }
            let report = frequency_capture(&outputs, &target, &bands, cfg.threshold)?;
            Ok(SchemeSpectrum { scheme, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralReport { seed, blocks })
}

/// Evaluation-grid inputs as an `n × 1` matrix.
pub fn grid_inputs(n: usize) -> Matrix {
    let xs = (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect();
    Matrix::from_vec(n, 1, xs).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_example() {
        let f = sigmoid_ft(SigmoidUnit::new(1.0, 0.0).unwrap(), 1.0).unwrap();
        assert!((f.norm() - 0.272029).abs() < 1e-6);
        assert!(f.re.abs() < 1e-15 && f.im < 0.0);
        assert!(matches!(
            sigmoid_ft(SigmoidUnit { a: 1.0, b: 0.0 }, 0.0),
            Err(SpectralError::ZeroFrequency)
        ));
        assert!(SigmoidUnit::new(0.0, 1.0).is_err());
    }

    #[test]
    fn large_omega_stays_finite() {
        let f = sigmoid_ft(SigmoidUnit::new(0.5, 0.3).unwrap(), 400.0).unwrap();
        assert!(f.norm().is_finite() && f.norm() >= 0.0);
        let g = sigmoid_ft(SigmoidUnit::new(1.0, 0.0).unwrap(), -3.0).unwrap();
        assert!((g.norm() - PI / (3.0 * PI).sinh()).abs() < 1e-15);
    }

    #[test]
    fn derivative_identity_against_quadrature() {
        let unit = SigmoidUnit::new(1.0, 0.0).unwrap();
        for k in 0..=18 {
            let w = 0.5 + 0.25 * k as f64;
            let lhs = Complex64::new(0.0, w) * sigmoid_ft(unit, w).unwrap();
            let q = sigmoid_derivative_ft_quadrature(unit, w, 60.0, 120_000).unwrap();
            assert!((lhs - q).norm() / q.norm() < 1e-4, "ω = {w}");
        }
    }

    #[test]
    fn log_slope_tends_to_minus_pi() {
        let unit = SigmoidUnit::new(1.0, 0.0).unwrap();
        for w in [5.0, 7.5, 10.0, 20.0] {
            let s = sigmoid_ft(unit, w + 1.0).unwrap().norm().ln() - sigmoid_ft(unit, w).unwrap().norm().ln();
            assert!((s / -PI - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn spectrum_examples() {
        let n = 256;
        let t: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        assert_eq!(residual_spectrum(&t, &t).unwrap().total_energy(), 0.0);
        assert!(residual_spectrum(&t, &t[1..]).is_err());

        let k = 7.0;
        let tone: Vec<f64> = (0..n).map(|i| (2.0 * PI * k * i as f64 / n as f64).sin()).collect();
        let s = residual_spectrum(&tone, &vec![0.0; n]).unwrap();
        assert!(s.energy_in(k, k) / s.total_energy() > 0.999);
        assert_eq!(s.omegas.len(), n);
        assert_eq!(s.omegas[0], -128.0);
        assert_eq!(s.omegas[n - 1], 127.0);
    }

    #[test]
    fn odd_length_ordering() {
        let s = dft(&[1.0, 2.0, 0.5, -1.0, 3.0]);
        assert_eq!(s.omegas, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert!((s.values[2].re - 5.5).abs() < 1e-12);
    }

    #[test]
    fn default_band_layout() {
        assert_eq!(default_bands(&[1.0, 3.0, 5.0]), vec![(1.0, 1.0), (3.0, 3.0), (5.0, 6.0)]);
        assert_eq!(default_bands(&[2.0, 8.0]), vec![(1.0, 3.0), (7.0, 9.0)]);
        assert!(check_bands(&[(1.0, 3.0), (3.0, 4.0)], 64).is_err());
        assert!(check_bands(&[(1.0, 40.0)], 64).is_err());
    }

    fn tones(n: usize, ks: &[(f64, f64)]) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = -PI + 2.0 * PI * i as f64 / n as f64;
                ks.iter().map(|(k, a)| a * (k * x).sin()).sum()
            })
            .collect()
    }

    #[test]
    fn capture_examples() {
        let n = 256;
        let target = tones(n, &[(1.0, 1.0), (5.0, 1.0)]);
        let bands = default_bands(&[1.0, 5.0]);
        let r = frequency_capture(std::slice::from_ref(&target), &target, &bands, 0.2).unwrap();
        assert_eq!(r.capture_epoch, vec![Some(0), Some(0)]);

        let low_only = tones(n, &[(1.0, 1.0)]);
        let r = frequency_capture(std::slice::from_ref(&low_only), &target, &bands, 0.2).unwrap();
        assert!(r.rel_error[0][0].unwrap() < 1e-20);
        assert!((r.rel_error[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert!(r.low_before_high());

        let r = frequency_capture(std::slice::from_ref(&target), &target, &bands, 0.0).unwrap();
        assert_eq!(r.capture_epoch, vec![None, None]);

        let r = frequency_capture(std::slice::from_ref(&target), &target, &[(1.0, 1.0), (20.0, 21.0)], 0.2).unwrap();
        assert_eq!(r.flagged, vec![false, true]);
        assert_eq!(r.rel_error[0][1], None);
    }

    proptest! {
        #[test]
        fn parseval(xs in prop::collection::vec(-5.0f64..5.0, 1..300)) {
            let s = residual_spectrum(&xs, &vec![0.0; xs.len()]).unwrap();
            let time: f64 = xs.iter().map(|x| x * x).sum();
            prop_assert!((time - s.total_energy() / xs.len() as f64).abs() <= 1e-9 * time.max(1.0));
        }

        #[test]
        fn band_separability(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
            let n = 128;
            let target = tones(n, &[(2.0, 1.0), (6.0, 0.7), (11.0, 0.4)]);
            let out = tones(n, &[(2.0, a), (6.0, b), (11.0, c)]);
            let shifted: Vec<f64> = out.iter().zip(tones(n, &[(2.0, 1.0 - a)])).map(|(o, t)| o + t).collect();
            let bands = default_bands(&[2.0, 6.0, 11.0]);
            let r1 = frequency_capture(&[out], &target, &bands, 0.2).unwrap();
            let r2 = frequency_capture(&[shifted], &target, &bands, 0.2).unwrap();
            for band in 1..3 {
                prop_assert!((r1.rel_error[0][band].unwrap() - r2.rel_error[0][band].unwrap()).abs() < 1e-12);
            }
        }
    }
}
