//! Named invariant and oracle checks across every module, run by the
//! `verify` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    boltzmann, generalized_entropy, generalized_entropy_mc, kl_divergence, sharpness_profile,
    Grid, GridField, SharpnessOptions, UniformBox,
};
use crate::composite::{
    adaptive_betas, composite_grad, composite_param_grad, composite_value, constraint9_check,
    critical_p, dvalue_dp, BetaRule, BetaWeights, CompositeMode, SchemeKind,
};
use crate::config::{config_hash, parse_config};
use crate::data::{
    gaussian_blobs, randomize_labels, split_indices, two_moons, RandomizationLevel,
};
use crate::losses::{jsd, loss_output_grad, loss_value, LossKind};
use crate::netcore::{
    backward_many, finite_diff_grad, forward, init_params, Activation, Matrix, MlpSpec, OutputKind,
    ParamVector,
};
use crate::optim::{train, GradientNoise, TrainConfig};
use crate::pacbayes::{
    bernoulli_kl, dp_pac_bound, kl_gaussians, kl_gaussians_mc, kl_inverse, linear_pac_bound,
    risk_certificate, BoundParams, GaussianPosterior, GaussianPrior,
};
use crate::spectral::{
    default_bands, frequency_capture, residual_spectrum, sigmoid_derivative_ft_quadrature,
    sigmoid_ft, SigmoidUnit,
};

type Check = Result<String, String>;

pub struct Invariant {
    pub name: &'static str,
    pub module: &'static str,
    pub description: &'static str,
    pub check: fn() -> Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct InvariantResult {
    pub name: String,
    pub module: String,
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct VerifySummary {
    pub passed: bool,
    pub total: usize,
    pub failed: Vec<String>,
    pub invariants: Vec<InvariantResult>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn unit_values(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0.01..0.99)).collect()
}

fn random_betas(r: &mut ChaCha8Rng, n: usize) -> BetaWeights {
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut b: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let head: f64 = b[..n - 1].iter().sum();
    b[n - 1] = 1.0 - head;
    BetaWeights::new(b).expect("normalized")
}

fn small_classifier() -> (MlpSpec, crate::data::Dataset) {
    let spec = MlpSpec::new(vec![2, 6, 2], Activation::Tanh, OutputKind::Softmax).expect("spec");
    (spec, two_moons(60, 0.1, 7).expect("moons"))
}

// netcore

fn net_backward_fd() -> Check {
    let spec = MlpSpec::new(vec![3, 5, 2], Activation::Sigmoid, OutputKind::Softmax).map_err(e2s)?;
    let blobs = gaussian_blobs(2, 6, 3, 0.8, 1).map_err(e2s)?;
    let terms = [LossKind::Ce, LossKind::Mse];
    let mut worst = 0.0f64;
    for (seed, p) in [(1u64, 1.0), (2, 2.0), (3, 3.5)] {
        let w = init_params(&spec, seed, 0.8);
        let betas = BetaWeights::new(vec![0.4, 0.6]).map_err(e2s)?;
        let mut vals = Vec::new();
        let (_, grads) = backward_many(&spec, &w, &blobs.inputs, |pred| {
            let mut out = Vec::new();
            for k in terms {
                vals.push(loss_value(k, pred, &blobs.targets)?.value);
                out.push(loss_output_grad(k, pred, &blobs.targets)?);
            }
            Ok::<_, crate::optim::OptimError>(out)
        })
        .map_err(e2s)?;
        let g = composite_param_grad(&vals, &grads, &betas, p, CompositeMode::Weighted).map_err(e2s)?;
        let objective = |pv: &ParamVector| {
            let pred = forward(&spec, pv, &blobs.inputs).expect("forward");
            let v: Vec<f64> = terms
                .iter()
                .map(|&k| loss_value(k, &pred, &blobs.targets).expect("loss").value)
                .collect();
            composite_value(&v, &betas, p, CompositeMode::Weighted).expect("value")
        };
        let fd = finite_diff_grad(objective, &w, 1e-5).map_err(e2s)?;
        worst = worst.max(rel_err(g.as_slice(), fd.as_slice()));
    }
    ensure(worst <= 1e-6, || format!("relative error {worst:e} > 1e-6"))?;
    Ok(format!("max relative error {worst:e}"))
}

fn net_forward_pure() -> Check {
    let (spec, data) = small_classifier();
    let w = init_params(&spec, 3, 1.0);
    let a = forward(&spec, &w, &data.inputs).map_err(e2s)?;
    let b = forward(&spec, &w, &data.inputs).map_err(e2s)?;
    ensure(
        a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()),
        || "outputs differ between calls".into(),
    )?;
    Ok("bit-identical".into())
}

fn net_softmax_simplex() -> Check {
    let spec = MlpSpec::new(vec![4, 8, 5], Activation::Relu, OutputKind::Softmax).map_err(e2s)?;
    let mut r = rng();
    let x: Vec<f64> = (0..40 * 4).map(|_| r.random_range(-30.0..30.0)).collect();
    let x = Matrix::from_vec(40, 4, x).map_err(e2s)?;
    let out = forward(&spec, &init_params(&spec, 9, 3.0), &x).map_err(e2s)?;
    for row in out.iter_rows() {
        let s: f64 = row.iter().sum();
        ensure((s - 1.0).abs() <= 1e-12 && row.iter().all(|&v| v >= 0.0), || {
            format!("row sums to {s}")
        })?;
    }
    Ok("40 rows on the simplex".into())
}

// losses

fn loss_nonneg_zero_at_fit() -> Check {
    let mut r = rng();
    for _ in 0..200 {
        let p: Vec<f64> = unit_values(&mut r, 6);
        let t: Vec<f64> = unit_values(&mut r, 6);
        let pm = Matrix::from_vec(6, 1, p).map_err(e2s)?;
        let tm = Matrix::from_vec(6, 1, t).map_err(e2s)?;
        for k in [LossKind::Mse, LossKind::Ce, LossKind::Jsd, LossKind::ZeroOne] {
            let v = loss_value(k, &pm, &tm).map_err(e2s)?.value;
            ensure(v >= 0.0, || format!("{k:?} negative: {v}"))?;
        }
    }
    let y = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).map_err(e2s)?;
    ensure(loss_value(LossKind::Mse, &y, &y).map_err(e2s)?.value == 0.0, || "MSE > 0 at fit".into())?;
    let ce = loss_value(LossKind::Ce, &y, &y).map_err(e2s)?.value;
    ensure(ce < 1e-10, || format!("CE {ce} at fit"))?;
    Ok("200 random instances".into())
}

fn loss_grad_fd() -> Check {
    let mut r = rng();
    let mut worst = 0.0f64;
    for cols in [1usize, 3] {
        for _ in 0..20 {
            let n = 4;
            let pred: Vec<f64> = if cols == 1 {
                unit_values(&mut r, n)
            } else {
                (0..n)
                    .flat_map(|_| {
                        let raw = unit_values(&mut r, cols);
                        let s: f64 = raw.iter().sum();
                        raw.into_iter().map(move |v| v / s)
                    })
                    .collect()
            };
            let target: Vec<f64> = (0..n)
                .flat_map(|i| (0..cols).map(move |c| if c == i % cols { 1.0 } else { 0.0 }))
                .collect();
            let target = if cols == 1 { unit_values(&mut r, n) } else { target };
            let pm = Matrix::from_vec(n, cols, pred.clone()).map_err(e2s)?;
            let tm = Matrix::from_vec(n, cols, target).map_err(e2s)?;
            for k in [LossKind::Mse, LossKind::Ce, LossKind::Jsd] {
                let g = loss_output_grad(k, &pm, &tm).map_err(e2s)?;
                let h = 1e-6;
                let fd: Vec<f64> = (0..pred.len())
                    .map(|i| {
                        let mut up = pred.clone();
                        let mut dn = pred.clone();
                        up[i] += h;
                        dn[i] -= h;
                        let f = |v: Vec<f64>| {
                            loss_value(k, &Matrix::from_vec(n, cols, v).expect("shape"), &tm)
                                .expect("loss")
                                .value
                        };
                        (f(up) - f(dn)) / (2.0 * h)
                    })
                    .collect();
                worst = worst.max(rel_err(g.as_slice(), &fd));
            }
        }
    }
    ensure(worst <= 1e-7, || format!("relative error {worst:e} > 1e-7"))?;
    Ok(format!("max relative error {worst:e}"))
}

fn loss_jsd() -> Check {
    let mut r = rng();
    for _ in 0..500 {
        let mut p = unit_values(&mut r, 4);
        let mut q = unit_values(&mut r, 4);
        let sp: f64 = p.iter().sum();
        let sq: f64 = q.iter().sum();
        p.iter_mut().for_each(|v| *v /= sp);
        q.iter_mut().for_each(|v| *v /= sq);
        let a = jsd(&p, &q);
        let b = jsd(&q, &p);
        ensure((a - b).abs() < 1e-15 && a <= 2f64.ln() + 1e-15 && a >= 0.0, || {
            format!("jsd {a} vs {b}")
        })?;
    }
    Ok("500 pairs".into())
}

fn loss_zero_one() -> Check {
    let mut r = rng();
    for _ in 0..200 {
        let p: Vec<f64> = (0..12).map(|_| r.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..4)
            .flat_map(|i| (0..3).map(move |c| if c == (i * 7) % 3 { 1.0 } else { 0.0 }))
            .collect();
        let pm = Matrix::from_vec(4, 3, p.clone()).map_err(e2s)?;
        let tm = Matrix::from_vec(4, 3, t).map_err(e2s)?;
        let a = loss_value(LossKind::ZeroOne, &pm, &tm).map_err(e2s)?.value;
        let transformed: Vec<f64> = p.iter().map(|v| (2.0 * v).exp() + 1.0).collect();
        let b = loss_value(LossKind::ZeroOne, &Matrix::from_vec(4, 3, transformed).map_err(e2s)?, &tm)
            .map_err(e2s)?
            .value;
        ensure((0.0..=1.0).contains(&a) && a == b, || format!("{a} vs {b}"))?;
    }
    Ok("200 instances".into())
}

// composite

const POWERS: [f64; 5] = [1.0, 1.5, 2.0, 3.0, 4.0];

fn comp_reductions() -> Check {
    let mut r = rng();
    for _ in 0..1000 {
        let n = r.random_range(2..5);
        let v = unit_values(&mut r, n);
        let b = random_betas(&mut r, n);
        let lin: f64 = v.iter().zip(b.as_slice()).map(|(x, w)| x * w).sum();
        let c = composite_value(&v, &b, 1.0, CompositeMode::Weighted).map_err(e2s)?;
        ensure((c - lin).abs() <= 1e-12, || format!("p=1: {c} vs {lin}"))?;
        let m = r.random_range(0..n);
        let p = POWERS[r.random_range(0..5)];
        let s = composite_value(&v, &BetaWeights::one_hot(n, m), p, CompositeMode::Weighted)
            .map_err(e2s)?;
        ensure((s - v[m]).abs() <= 1e-12, || format!("one-hot: {s} vs {}", v[m]))?;
    }
    Ok("1000 instances".into())
}

fn comp_weighted_monotone() -> Check {
    let mut r = rng();
    for _ in 0..1000 {
        let v = unit_values(&mut r, 3);
        let b = random_betas(&mut r, 3);
        let vals: Vec<f64> = POWERS
            .iter()
            .map(|&p| composite_value(&v, &b, p, CompositeMode::Weighted))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        ensure(vals.windows(2).all(|w| w[1] >= w[0] - 1e-12), || format!("{vals:?}"))?;
    }
    Ok("1000 instances".into())
}

fn comp_norm_monotone() -> Check {
    let mut r = rng();
    let u = BetaWeights::uniform(2);
    for _ in 0..1000 {
        let v = unit_values(&mut r, 2);
        let vals: Vec<f64> = POWERS
            .iter()
            .map(|&p| composite_value(&v, &u, p, CompositeMode::UnweightedNorm))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        ensure(vals.windows(2).all(|w| w[1] <= w[0] + 1e-12), || format!("{vals:?}"))?;
        ensure(vals.iter().all(|&x| x <= v[0] + v[1] + 1e-12), || "norm above sum".into())?;
    }
    Ok("1000 instances".into())
}

fn comp_bounds() -> Check {
    let mut r = rng();
    for _ in 0..1000 {
        let v = unit_values(&mut r, 3);
        let b = random_betas(&mut r, 3);
        let p = r.random_range(1.0..6.0);
        let c = composite_value(&v, &b, p, CompositeMode::Weighted).map_err(e2s)?;
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure(c >= lo - 1e-12 && c <= hi + 1e-12, || format!("{c} outside [{lo}, {hi}]"))?;
    }
    Ok("1000 instances".into())
}

/// Composite gradient with respect to the loss values against central
/// differences.
pub fn composite_grad_fd_error(instances: usize, seed: u64) -> Result<f64, String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let p = POWERS[i % POWERS.len()];
        let v = unit_values(&mut r, 2);
        let b = random_betas(&mut r, 2);
        for mode in [CompositeMode::Weighted, CompositeMode::UnweightedNorm] {
            let e0 = [1.0, 0.0];
            let e1 = [0.0, 1.0];
            let g = composite_grad(&v, &[&e0, &e1], &b, p, mode).map_err(e2s)?;
            let h = 1e-5;
            let fd: Vec<f64> = (0..2)
                .map(|m| {
                    let mut up = v.clone();
                    let mut dn = v.clone();
                    up[m] += h;
                    dn[m] -= h;
                    let f = |x: &[f64]| composite_value(x, &b, p, mode).expect("value");
                    (f(&up) - f(&dn)) / (2.0 * h)
                })
                .collect();
            worst = worst.max(rel_err(&g, &fd));
        }
    }
    Ok(worst)
}

fn comp_grad_fd() -> Check {
    let worst = composite_grad_fd_error(100, 11)?;
    ensure(worst <= 1e-8, || format!("relative error {worst:e} > 1e-8"))?;
    let mut r = rng();
    let mut worst_dp = 0.0f64;
    for _ in 0..100 {
        let v = unit_values(&mut r, 2);
        let b = random_betas(&mut r, 2);
        let p = r.random_range(1.2..4.0);
        for mode in [CompositeMode::Weighted, CompositeMode::UnweightedNorm] {
            let h = 1e-5;
            let f = |q: f64| composite_value(&v, &b, q, mode).expect("value");
            let fd = (f(p + h) - f(p - h)) / (2.0 * h);
            let d = dvalue_dp(&v, &b, p, mode).map_err(e2s)?;
            worst_dp = worst_dp.max((d - fd).abs() / fd.abs().max(1e-3));
        }
    }
    ensure(worst_dp <= 1e-8, || format!("dvalue_dp relative error {worst_dp:e}"))?;
    Ok(format!("grad {worst:e}, dvalue_dp {worst_dp:e}"))
}

fn comp_betas() -> Check {
    let mut r = rng();
    for _ in 0..500 {
        let norms: Vec<f64> = (0..3).map(|_| r.random_range(0.0..5.0)).collect();
        for rule in [BetaRule::Softmax, BetaRule::Fixed] {
            let b = adaptive_betas(&norms, rule).map_err(e2s)?;
            let s: f64 = b.as_slice().iter().sum();
            ensure((s - 1.0).abs() < 1e-12 && b.as_slice().iter().all(|&x| x >= 0.0), || {
                format!("{rule:?} off simplex")
            })?;
        }
        let b = adaptive_betas(&norms, BetaRule::Softmax).map_err(e2s)?;
        let perm = [norms[2], norms[0], norms[1]];
        let bp = adaptive_betas(&perm, BetaRule::Softmax).map_err(e2s)?;
        let expect = [b.as_slice()[2], b.as_slice()[0], b.as_slice()[1]];
        ensure(
            bp.as_slice().iter().zip(expect).all(|(x, y)| (x - y).abs() < 1e-15),
            || "softmax not permutation equivariant".into(),
        )?;
        let pm = adaptive_betas(&norms[..2], BetaRule::MaxFirst).map_err(e2s)?;
        ensure(pm.as_slice()[0] >= 0.5, || format!("max-first β1 = {}", pm.as_slice()[0]))?;
    }
    Ok("500 instances".into())
}

fn comp_argmax() -> Check {
    let mut r = rng();
    for _ in 0..500 {
        let norms: Vec<f64> = (0..4).map(|_| r.random_range(0.0..5.0)).collect();
        let b = adaptive_betas(&norms, BetaRule::Softmax).map_err(e2s)?;
        let arg = |xs: &[f64], max: bool| {
            (0..xs.len())
                .max_by(|&i, &j| {
                    let o = xs[i].total_cmp(&xs[j]);
                    if max {
                        o
                    } else {
                        o.reverse()
                    }
                })
                .expect("nonempty")
        };
        ensure(arg(b.as_slice(), true) == arg(&norms, false), || "largest weight misplaced".into())?;
    }
    Ok("500 instances".into())
}

fn comp_critical_p() -> Check {
    let mut r = rng();
    for _ in 0..1000 {
        let l = r.random_range(0.01..1.0);
        let g = r.random_range(0.05..2.0) * if r.random::<bool>() { 1.0 } else { -1.0 };
        let h = -r.random_range(0.001..2.0);
        let ps = critical_p(l, g, h).map_err(e2s)?;
        ensure(constraint9_check(l, g, h, ps + 1e-9) && !constraint9_check(l, g, h, ps - 1e-9), || {
            format!("no flip at p* = {ps} for ({l}, {g}, {h})")
        })?;
    }
    let ps = critical_p(0.5, 0.1, -0.02).map_err(e2s)?;
    ensure(ps == 2.0, || format!("analytic p* = {ps}"))?;
    Ok("1000 triples, analytic p* = 2".into())
}

// optim

fn tiny_config(scheme: SchemeKind) -> TrainConfig {
    let mut c = TrainConfig::new(scheme, 6, 16, 5);
    c.warmup_epochs = 2;
    c.track_constraint9 = false;
    c
}

fn optim_deterministic() -> Check {
    let (spec, data) = small_classifier();
    let mut cfg = tiny_config(SchemeKind::Nonlinear(2.0));
    cfg.noise_eps = 1e-3;
    let a = train(&spec, &data, &data, &cfg).map_err(e2s)?;
    let b = train(&spec, &data, &data, &cfg).map_err(e2s)?;
    ensure(a.to_csv() == b.to_csv() && a.final_params == b.final_params, || {
        "trajectories differ".into()
    })?;
    Ok("byte-identical reruns".into())
}

fn optim_warmup() -> Check {
    let (spec, data) = small_classifier();
    let t = train(&spec, &data, &data, &tiny_config(SchemeKind::Nonlinear(3.0))).map_err(e2s)?;
    for row in t.rows.iter().filter(|r| r.warmup) {
        ensure(row.betas == vec![1.0, 0.0] && row.composite == row.losses[0], || {
            format!("epoch {} not pure CE", row.epoch)
        })?;
    }
    ensure(t.rows.iter().filter(|r| r.warmup).count() == 2, || "warmup rows missing".into())?;
    Ok("warmup rows are pure CE".into())
}

fn optim_multi_equals_p1() -> Check {
    let (spec, data) = small_classifier();
    let mut a = tiny_config(SchemeKind::Multi);
    a.beta_rule = BetaRule::Fixed;
    a.initial_betas = Some(BetaWeights::new(vec![0.3, 0.7]).map_err(e2s)?);
    let mut b = a.clone();
    b.scheme = SchemeKind::Nonlinear(1.0);
    let ta = train(&spec, &data, &data, &a).map_err(e2s)?;
    let tb = train(&spec, &data, &data, &b).map_err(e2s)?;
    for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
        let d = ra
            .losses
            .iter()
            .zip(&rb.losses)
            .map(|(x, y)| (x - y).abs())
            .fold((ra.composite - rb.composite).abs(), f64::max);
        ensure(d <= 1e-10, || format!("epoch {} differs by {d:e}", ra.epoch))?;
    }
    Ok("identical per epoch".into())
}

fn optim_noise() -> Check {
    let eps = 0.05;
    let mut n = GradientNoise::new(eps, 3);
    let mut buf = vec![0.0; 200_000];
    n.perturb(&mut buf);
    let m = buf.iter().sum::<f64>() / buf.len() as f64;
    let var = buf.iter().map(|x| (x - m).powi(2)).sum::<f64>() / buf.len() as f64;
    let ratio = var / (eps * eps);
    ensure((ratio - 1.0).abs() <= 0.05, || format!("variance ratio {ratio}"))?;
    Ok(format!("variance ratio {ratio:.4}"))
}

// analysis

fn an_density_kl() -> Check {
    let mut r = rng();
    let g = Grid::line(-2.0, 2.0, 200).map_err(e2s)?;
    for _ in 0..100 {
        let a: Vec<f64> = (0..200).map(|_| r.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..200).map(|_| r.random_range(-5.0..5.0)).collect();
        let (p, _) = boltzmann(&GridField::new(g.clone(), a).map_err(e2s)?, 1.3).map_err(e2s)?;
        let (q, _) = boltzmann(&GridField::new(g.clone(), b).map_err(e2s)?, 0.7).map_err(e2s)?;
        ensure((p.integral() - 1.0).abs() <= 1e-9, || "density not normalized".into())?;
        ensure(kl_divergence(&p, &q).map_err(e2s)? >= 0.0, || "negative KL".into())?;
        ensure(kl_divergence(&p, &p).map_err(e2s)? == 0.0, || "KL(P, P) != 0".into())?;
    }
    Ok("100 density pairs".into())
}

fn random_pair(r: &mut ChaCha8Rng, g: &Grid) -> Result<(GridField, GridField), String> {
    let n = g.len();
    let a = GridField::new(g.clone(), unit_values(r, n)).map_err(e2s)?;
    let b = GridField::new(g.clone(), unit_values(r, n)).map_err(e2s)?;
    Ok((a, b))
}

fn an_pointwise() -> Check {
    let mut r = rng();
    let g = Grid::line(0.0, 1.0, 500).map_err(e2s)?;
    let u = BetaWeights::uniform(2);
    for _ in 0..20 {
        let (a, b) = random_pair(&mut r, &g)?;
        for &p in &POWERS {
            let f = GridField::zip_with(&[&a, &b], |v| {
                composite_value(v, &u, p, CompositeMode::UnweightedNorm)
            })
            .map_err(e2s)?;
            for i in 0..g.len() {
                ensure(f.values[i] <= a.values[i] + b.values[i] + 1e-12, || {
                    format!("point {i} at p = {p}")
                })?;
            }
        }
    }
    Ok("20 field pairs".into())
}

fn an_entropy_order() -> Check {
    let mut r = rng();
    let g = Grid::line(0.0, 1.0, 300).map_err(e2s)?;
    let u = BetaWeights::uniform(2);
    for _ in 0..20 {
        let (a, b) = random_pair(&mut r, &g)?;
        let s: Vec<f64> = POWERS
            .iter()
            .map(|&p| generalized_entropy(&[&a, &b], &u, p, CompositeMode::UnweightedNorm))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        ensure(s.windows(2).all(|w| w[1] >= w[0] - 1e-12), || format!("{s:?}"))?;
    }
    Ok("20 field pairs".into())
}

fn an_grid_mc() -> Check {
    let g = Grid::new(vec![(-2.0, 2.0), (-1.0, 1.0)], vec![200, 100]).map_err(e2s)?;
    let f1 = |x: &[f64]| 0.2 + 0.1 * (x[0] * x[0] + x[1] * x[1]);
    let f2 = |x: &[f64]| 0.4 + 0.05 * (x[0] - 0.5).powi(2);
    let l1 = GridField::from_fn(&g, f1).map_err(e2s)?;
    let l2 = GridField::from_fn(&g, f2).map_err(e2s)?;
    let b = BetaWeights::new(vec![0.3, 0.7]).map_err(e2s)?;
    let grid = generalized_entropy(&[&l1, &l2], &b, 2.0, CompositeMode::Weighted).map_err(e2s)?;
    let prop = UniformBox {
        bounds: vec![(-2.0, 2.0), (-1.0, 1.0)],
    };
    let mc = generalized_entropy_mc(
        |x| vec![f1(x), f2(x)],
        &prop,
        &b,
        2.0,
        CompositeMode::Weighted,
        20_000,
        1e-2,
        8,
    )
    .map_err(e2s)?;
    let gap = (mc.log_z - grid).abs();
    ensure(gap <= 3.0 * mc.std_err + 1e-4, || format!("gap {gap:e}, se {:e}", mc.std_err))?;
    Ok(format!("gap {gap:.2e} vs 3 SE {:.2e}", 3.0 * mc.std_err))
}

fn an_sharpness() -> Check {
    let (spec, data) = small_classifier();
    let t = train(&spec, &data, &data, &tiny_config(SchemeKind::Multi)).map_err(e2s)?;
    let alphas = [0.0, 0.05, 0.1, 0.25, 0.5];
    let z = sharpness_profile(&spec, &t.final_params, &data, &alphas, &SharpnessOptions::default())
        .map_err(e2s)?;
    ensure(z[0] == 0.0 && z.iter().all(|&v| v >= 0.0), || format!("{z:?}"))?;
    ensure(z.windows(2).all(|w| w[1] >= w[0]), || format!("not monotone: {z:?}"))?;
    Ok(format!("{z:.4?}"))
}

// pacbayes

fn pb_round_trip() -> Check {
    let mut r = rng();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q = r.random_range(0.0..0.95);
        let p = r.random_range(q..0.999);
        worst = worst.max((kl_inverse(q, bernoulli_kl(q, p)) - p).abs());
    }
    ensure(worst <= 1e-9, || format!("round-trip error {worst:e}"))?;
    Ok(format!("max error {worst:e}"))
}

fn pb_monotone() -> Check {
    let mut r = rng();
    for _ in 0..500 {
        let m = r.random_range(2..5000);
        let bp = BoundParams {
            lambda: r.random_range(0.6..5.0),
            l_max: 1.0,
            delta: r.random_range(0.01..0.5),
            m,
            eps_dp: r.random_range(0.0..0.2),
        };
        let kl = r.random_range(0.0..30.0);
        let e = r.random_range(0.0..0.9);
        let a = linear_pac_bound(e, kl, &bp).map_err(e2s)?;
        ensure(linear_pac_bound(e, kl + 0.1, &bp).map_err(e2s)? > a, || "linear not increasing in kl".into())?;
        ensure(linear_pac_bound(e + 0.01, kl, &bp).map_err(e2s)? > a, || "linear not increasing in risk".into())?;
        ensure(dp_pac_bound(kl + 0.1, &bp).map_err(e2s)? > dp_pac_bound(kl, &bp).map_err(e2s)?, || {
            "dp not increasing in kl".into()
        })?;
        let eps_star = ((3.0 / bp.delta).ln() / m as f64).sqrt();
        let lo = dp_pac_bound(kl, &BoundParams { eps_dp: eps_star * (1.0 - 1e-10), ..bp }).map_err(e2s)?;
        let hi = dp_pac_bound(kl, &BoundParams { eps_dp: eps_star * (1.0 + 1e-10), ..bp }).map_err(e2s)?;
        ensure((hi - lo).abs() < 1e-8, || "dp bound discontinuous at crossover".into())?;
    }
    Ok("500 parameter draws".into())
}

fn pb_kl_mc() -> Check {
    let q = GaussianPosterior::new(ParamVector(vec![0.5, -0.3, 0.1, 0.8]), 0.3).map_err(e2s)?;
    let p = GaussianPrior::centered(4, 1.0).map_err(e2s)?;
    let (est, se) = kl_gaussians_mc(&q, &p, 100_000, 2).map_err(e2s)?;
    let exact = kl_gaussians(&q, &p).map_err(e2s)?;
    ensure((est - exact).abs() <= 3.0 * se, || format!("{est} vs {exact} (se {se})"))?;
    Ok(format!("|Δ| = {:.2e}, SE = {se:.2e}", (est - exact).abs()))
}

fn pb_certificate() -> Check {
    let (spec, data) = small_classifier();
    let w = init_params(&spec, 2, 0.5);
    let q = GaussianPosterior::new(w.clone(), 0.05).map_err(e2s)?;
    let p = GaussianPrior::centered(w.len(), 1.0).map_err(e2s)?;
    let bp = BoundParams {
        lambda: 1.0,
        l_max: 1.0,
        delta: 0.05,
        m: data.len(),
        eps_dp: 0.01,
    };
    let c = risk_certificate(&q, &p, &spec, &data, &bp, 10, 3).map_err(e2s)?;
    ensure(c.risk_upper >= c.emp_risk, || "certificate below empirical risk".into())?;
    let again = risk_certificate(&q, &p, &spec, &data, &bp, 10, 3).map_err(e2s)?;
    ensure(c == again, || "certificate not deterministic".into())?;
    let bound = dp_pac_bound(c.kl_q_p, &bp).map_err(e2s)?;
    ensure(c.dp_bound == bound && c.risk_upper == kl_inverse(c.emp_risk, bound), || {
        "certificate arithmetic mismatch".into()
    })?;
    Ok(format!("risk_upper {:.4} ≥ emp_risk {:.4}", c.risk_upper, c.emp_risk))
}

// spectral

fn sp_decay() -> Check {
    let u = SigmoidUnit::new(1.0, 0.0).map_err(e2s)?;
    let mut prev = f64::INFINITY;
    for k in 1..200 {
        let w = 0.05 * k as f64;
        let m = sigmoid_ft(u, w).map_err(e2s)?.norm();
        ensure(m < prev, || format!("not decreasing at ω = {w}"))?;
        prev = m;
    }
    for w in [5.0, 6.0, 8.0, 12.0] {
        let s = sigmoid_ft(u, w + 1.0).map_err(e2s)?.norm().ln() - sigmoid_ft(u, w).map_err(e2s)?.norm().ln();
        ensure((s / -std::f64::consts::PI - 1.0).abs() <= 0.01, || format!("slope {s} at ω = {w}"))?;
    }
    Ok("strictly decreasing, slope → −π".into())
}

fn sp_quadrature() -> Check {
    let u = SigmoidUnit::new(1.0, 0.0).map_err(e2s)?;
    let mut worst = 0.0f64;
    for k in 0..=9 {
        let w = 0.5 + 0.5 * k as f64;
        let lhs = num_complex::Complex64::new(0.0, w) * sigmoid_ft(u, w).map_err(e2s)?;
        let q = sigmoid_derivative_ft_quadrature(u, w, 60.0, 120_000).map_err(e2s)?;
        worst = worst.max((lhs - q).norm() / q.norm());
    }
    ensure(worst <= 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:e}"))
}

fn sp_parseval() -> Check {
    let mut r = rng();
    for _ in 0..50 {
        let n = r.random_range(8..400);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let s = residual_spectrum(&a, &b).map_err(e2s)?;
        let time: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        let freq = s.total_energy() / n as f64;
        ensure((time - freq).abs() <= 1e-9 * time.max(1.0), || format!("{time} vs {freq}"))?;
    }
    Ok("50 random residuals".into())
}

fn sp_separability() -> Check {
    let n = 256;
    let x = |i: usize| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
    let tone = |k: f64, a: f64| (0..n).map(move |i| a * (k * x(i)).sin());
    let target: Vec<f64> = (0..n).map(|i| (x(i)).sin() + (3.0 * x(i)).sin() + (5.0 * x(i)).sin()).collect();
    let out: Vec<f64> = tone(1.0, 0.4).zip(tone(3.0, 0.2)).zip(tone(5.0, -0.3)).map(|((a, b), c)| a + b + c).collect();
    let shifted: Vec<f64> = out.iter().zip(tone(1.0, 0.6)).map(|(o, t)| o + t).collect();
    let bands = default_bands(&[1.0, 3.0, 5.0]);
    let a = frequency_capture(&[out], &target, &bands, 0.2).map_err(e2s)?;
    let b = frequency_capture(&[shifted], &target, &bands, 0.2).map_err(e2s)?;
    for band in 1..3 {
        let (x, y) = (a.rel_error[0][band].unwrap_or(f64::NAN), b.rel_error[0][band].unwrap_or(f64::NAN));
        ensure((x - y).abs() < 1e-12, || format!("band {band}: {x} vs {y}"))?;
    }
    ensure(b.capture_epoch[0] == Some(0), || "low band not captured after completion".into())?;
    Ok("other bands unchanged".into())
}

// data

fn data_determinism() -> Check {
    ensure(two_moons(100, 0.1, 4).map_err(e2s)? == two_moons(100, 0.1, 4).map_err(e2s)?, || {
        "two_moons not seeded".into()
    })?;
    ensure(
        gaussian_blobs(3, 20, 2, 0.5, 4).map_err(e2s)? == gaussian_blobs(3, 20, 2, 0.5, 4).map_err(e2s)?,
        || "gaussian_blobs not seeded".into(),
    )?;
    let (tr, va) = split_indices(101, 0.7, 9).map_err(e2s)?;
    let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
    all.sort_unstable();
    ensure(all == (0..101).collect::<Vec<_>>(), || "split not a partition".into())?;
    let d = randomize_labels(
        &gaussian_blobs(4, 50, 2, 0.5, 1).map_err(e2s)?,
        RandomizationLevel::new(0.5).map_err(e2s)?,
        2,
    )
    .map_err(e2s)?;
    for row in d.targets.iter_rows() {
        ensure(row.iter().filter(|&&v| v == 1.0).count() == 1 && row.iter().sum::<f64>() == 1.0, || {
            "invalid one-hot row".into()
        })?;
    }
    Ok("seeded generators, partition, one-hot".into())
}

fn data_binomial() -> Check {
    let n = 10_000;
    let k = 10;
    let r = 0.6;
    let base = gaussian_blobs(k, n / k, 2, 0.5, 3).map_err(e2s)?;
    let d = randomize_labels(&base, RandomizationLevel::new(r).map_err(e2s)?, 5).map_err(e2s)?;
    let changed = base
        .labels()
        .expect("labels")
        .iter()
        .zip(d.labels().expect("labels"))
        .filter(|(a, b)| **a != *b)
        .count() as f64;
    let prob = r * (1.0 - 1.0 / k as f64);
    let mean = prob * n as f64;
    let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
    ensure((changed - mean).abs() <= 4.0 * sd, || format!("{changed} changed, expected {mean} ± {sd}"))?;
    Ok(format!("{changed} changed, expected {mean:.0} ± {:.0}", 4.0 * sd))
}

// cli

fn cli_unknown_keys() -> Check {
    let bad = r#"{"klsweep": {"p_list": [1.0]}, "bogus": 1}"#;
    let err = parse_config(bad).err().ok_or("unknown key accepted")?;
    ensure(err.to_string().contains("bogus"), || format!("error lacks field name: {err}"))?;
    let nested = r#"{"train": {"scheme": "multi", "epochs": 3, "batch_size": 4, "seed": 1, "lr": 0.1}}"#;
    let err = parse_config(nested).err().ok_or("nested unknown key accepted")?;
    ensure(err.to_string().contains("train"), || format!("error lacks path: {err}"))?;
    Ok("unknown keys rejected with paths".into())
}

fn cli_hash() -> Check {
    let text = r#"{"klsweep": {"p_list": [1.0, 2.0]}}"#;
    let a = parse_config(text).map_err(e2s)?;
    let b = parse_config(text).map_err(e2s)?;
    let c = parse_config(r#"{"klsweep": {"p_list": [1.0, 3.0]}}"#).map_err(e2s)?;
    ensure(config_hash(&a) == config_hash(&b) && config_hash(&a) != config_hash(&c), || {
        "config hash unstable".into()
    })?;
    Ok(config_hash(&a))
}

macro_rules! inv {
    ($name:expr, $module:expr, $desc:expr, $f:expr) => {
        Invariant {
            name: $name,
            module: $module,
            description: $desc,
            check: $f,
        }
    };
}

pub fn invariants() -> Vec<Invariant> {
    vec![
        inv!("backward_matches_finite_differences", "netcore", "composite-objective parameter gradient vs central differences, relative error ≤ 1e-6", net_backward_fd),
        inv!("forward_is_pure", "netcore", "identical inputs give bit-identical outputs", net_forward_pure),
        inv!("softmax_rows_on_simplex", "netcore", "softmax rows sum to 1 within 1e-12 and are nonnegative", net_softmax_simplex),
        inv!("losses_nonnegative_zero_at_fit", "losses", "all losses ≥ 0; MSE and CE vanish at a perfect fit", loss_nonneg_zero_at_fit),
        inv!("loss_output_grad_matches_finite_differences", "losses", "output gradients vs central differences, relative error ≤ 1e-7", loss_grad_fd),
        inv!("jsd_symmetric_and_bounded", "losses", "JSD symmetric and ≤ ln 2 per row", loss_jsd),
        inv!("zero_one_range_and_monotone_invariance", "losses", "0-1 loss in [0,1], invariant to argmax-preserving monotone maps", loss_zero_one),
        inv!("exact_reductions", "composite", "p = 1 equals the linear combination; one-hot β equals the single loss (≤ 1e-12)", comp_reductions),
        inv!("weighted_power_mean_monotone_in_p", "composite", "weighted power mean non-decreasing in p", comp_weighted_monotone),
        inv!("lp_norm_monotone_and_below_sum", "composite", "unweighted ℓ_p value non-increasing in p and ≤ Σ v", comp_norm_monotone),
        inv!("weighted_value_between_min_and_max", "composite", "min(v) ≤ weighted composite ≤ max(v)", comp_bounds),
        inv!("composite_grad_matches_finite_differences", "composite", "composite_grad and dvalue_dp vs central differences, relative error ≤ 1e-8", comp_grad_fd),
        inv!("adaptive_betas_on_simplex", "composite", "β on the simplex; softmax permutation-equivariant; max-first β1 ≥ 0.5", comp_betas),
        inv!("softmax_beta_favors_smallest_gradient", "composite", "largest β goes to the smallest gradient norm", comp_argmax),
        inv!("constraint9_flips_at_critical_p", "composite", "constraint sign flips at p* (±1e-9); (0.5, 0.1, −0.02) gives p* = 2", comp_critical_p),
        inv!("training_deterministic", "optim", "identical configs give byte-identical trajectories", optim_deterministic),
        inv!("warmup_is_pure_cross_entropy", "optim", "warmup rows have one-hot CE β and composite equal to CE", optim_warmup),
        inv!("multi_equals_nonlinear_p1", "optim", "fixed β, no noise: Multi and Nonlinear(1) agree to 1e-10", optim_multi_equals_p1),
        inv!("gradient_noise_variance", "optim", "noise variance within 5% of ε² over 2e5 draws", optim_noise),
        inv!("densities_normalized_kl_nonnegative", "analysis", "densities integrate to 1 within 1e-9; KL ≥ 0 and KL(P, P) = 0", an_density_kl),
        inv!("pointwise_norm_below_sum", "analysis", "(L1^p + L2^p)^(1/p) ≤ L1 + L2 at every grid point", an_pointwise),
        inv!("generalized_entropy_nondecreasing_in_p", "analysis", "unweighted generalized entropy non-decreasing in p", an_entropy_order),
        inv!("grid_mc_entropy_agreement", "analysis", "grid and importance-sampling entropy agree within 3 SE", an_grid_mc),
        inv!("sharpness_nonnegative_monotone", "analysis", "ζ_0 = 0, ζ ≥ 0 and non-decreasing in α", an_sharpness),
        inv!("kl_inverse_round_trip", "pacbayes", "kl_inverse(q, kl(q, p)) = p within 1e-9", pb_round_trip),
        inv!("bounds_monotone_and_continuous", "pacbayes", "bounds increase in KL and risk; dp bound continuous at its branch switch", pb_monotone),
        inv!("kl_gaussians_matches_mc", "pacbayes", "closed-form Gaussian KL within 3 SE of Monte Carlo", pb_kl_mc),
        inv!("certificate_arithmetic", "pacbayes", "certificate composes its parts, ≥ empirical risk, deterministic", pb_certificate),
        inv!("sigmoid_ft_decay", "spectral", "|F| strictly decreasing; log-slope → −π within 1% for ω ≥ 5", sp_decay),
        inv!("sigmoid_ft_quadrature_identity", "spectral", "iω F[σ] vs windowed quadrature of σ′, relative error ≤ 1e-4 on [0.5, 5]", sp_quadrature),
        inv!("parseval_identity", "spectral", "Σ|r|² = (1/n) Σ|DFT|² within 1e-9", sp_parseval),
        inv!("band_separability", "spectral", "completing one band leaves other bands' errors unchanged", sp_separability),
        inv!("generators_seeded_splits_partition", "data", "seeded generators, exhaustive disjoint splits, valid one-hot labels", data_determinism),
        inv!("randomization_binomial", "data", "changed labels within the binomial interval of r(1 − 1/K)n", data_binomial),
        inv!("config_rejects_unknown_keys", "cli", "unknown config keys rejected with their path", cli_unknown_keys),
        inv!("config_hash_deterministic", "cli", "config hash stable across parses and sensitive to content", cli_hash),
    ]
}

pub fn run_verify() -> VerifySummary {
    let results: Vec<InvariantResult> = invariants()
        .par_iter()
        .map(|inv| {
            let outcome = std::panic::catch_unwind(inv.check)
                .unwrap_or_else(|_| Err("check panicked".to_string()));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            InvariantResult {
                name: format!("{}.{}", inv.module, inv.name),
                module: inv.module.to_string(),
                description: inv.description.to_string(),
                passed,
                detail,
            }
        })
        .collect();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    VerifySummary {
        passed: failed.is_empty(),
        total: results.len(),
        failed,
        invariants: results,
    }
}
