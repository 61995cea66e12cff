//! Dense feed-forward network with exact reverse-mode gradients.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` occupies a
//! contiguous block: the `out × in` weight matrix (row-major) followed by
//! the `out` biases. Everything downstream (losses, composite objective,
//! training, sharpness, PAC-Bayes posteriors) treats the network as a
//! differentiable map `params → predictions`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("parameter length {got} does not match spec (expected {expected})")]
    ParamLength { expected: usize, got: usize },
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    Shape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if data.len() != rows * cols {
            return Err(NetError::Shape {
                expected_rows: rows,
                expected_cols: cols,
                rows: data.len() / cols.max(1),
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NetError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NetError::Shape {
                    expected_rows: rows.len(),
                    expected_cols: cols,
                    rows: rows.len(),
                    cols: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub(crate) fn check_shape(&self, rows: usize, cols: usize) -> Result<(), NetError> {
        if self.rows != rows || self.cols != cols {
            return Err(NetError::Shape {
                expected_rows: rows,
                expected_cols: cols,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Output head. `Sigmoid` is the binary (single-unit) probability head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Linear,
    Softmax,
    Sigmoid,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input dimension first, output dimension last.
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_kind: OutputKind,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: Activation,
        output_kind: OutputKind,
    ) -> Result<Self, NetError> {
        let spec = Self {
            layer_widths,
            hidden_activation,
            output_kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_widths.len() < 2 {
            return Err(NetError::InvalidSpec(
                "at least an input and an output layer are required".into(),
            ));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(NetError::InvalidSpec(format!("layer {i} has width 0")));
        }
        let out = self.output_dim();
        match self.output_kind {
            OutputKind::Softmax if out < 2 => Err(NetError::InvalidSpec(
                "softmax output needs width >= 2; use the sigmoid head for binary outputs".into(),
            )),
            OutputKind::Sigmoid if out != 1 => Err(NetError::InvalidSpec(
                "sigmoid output head is the binary mode and must have width 1".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets of (weights, biases) for layer `l` inside the flat vector.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let wo = off;
                let bo = off + w[0] * w[1];
                off = bo + w[1];
                (wo, bo)
            })
            .collect()
    }
}

/// Flat parameter vector of an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<(), NetError> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(coordinate) => Err(NetError::NonFinite { coordinate }),
            None => Ok(()),
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self, NetError> {
        if inputs.rows() == 0 {
            return Err(NetError::InvalidSpec("batch must contain at least one sample".into()));
        }
        if inputs.rows() != targets.rows() {
            return Err(NetError::Shape {
                expected_rows: inputs.rows(),
                expected_cols: targets.cols(),
                rows: targets.rows(),
                cols: targets.cols(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

fn check_params(spec: &MlpSpec, params: &ParamVector) -> Result<(), NetError> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(NetError::ParamLength {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Post-activation outputs of every layer, input included.
struct ForwardTrace {
    activations: Vec<Matrix>,
}

fn forward_trace(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &Matrix,
) -> Result<ForwardTrace, NetError> {
    check_params(spec, params)?;
    if inputs.cols() != spec.input_dim() {
        return Err(NetError::DimensionMismatch {
            layer: 0,
            expected: spec.input_dim(),
            got: inputs.cols(),
        });
    }
    if let Some(coordinate) = inputs.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(NetError::NonFinite { coordinate });
    }
    let n = inputs.rows();
    let p = params.as_slice();
    let last = spec.num_layers() - 1;
    let mut activations = Vec::with_capacity(spec.num_layers() + 1);
    activations.push(inputs.clone());
    for (l, (wo, bo)) in spec.layer_offsets().into_iter().enumerate() {
        let fan_in = spec.layer_widths[l];
        let fan_out = spec.layer_widths[l + 1];
        let w = &p[wo..bo];
        let b = &p[bo..bo + fan_out];
        let prev = &activations[l];
        let mut z = Matrix::zeros(n, fan_out);
        for i in 0..n {
            let x = prev.row(i);
            let zr = z.row_mut(i);
            for (j, zj) in zr.iter_mut().enumerate() {
                let wr = &w[j * fan_in..(j + 1) * fan_in];
                *zj = b[j] + wr.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        if l < last {
            let act = spec.hidden_activation;
            z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
        } else {
            match spec.output_kind {
                OutputKind::Linear => {}
                OutputKind::Sigmoid => z.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v)),
                OutputKind::Softmax => {
                    for i in 0..n {
                        softmax_in_place(z.row_mut(i));
                    }
                }
            }
        }
        activations.push(z);
    }
    Ok(ForwardTrace { activations })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Network predictions for every row of `inputs` (`n × K`).
pub fn forward(spec: &MlpSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix, NetError> {
    let mut trace = forward_trace(spec, params, inputs)?;
    Ok(trace.activations.pop().expect("non-empty trace"))
}

/// Predictions together with the gradient of `Σ_ij G_ij · pred_ij` with
/// respect to the parameters, where `G = output_grad(pred)`.
///
/// Callers that need the loss gradient for several heads at once should use
/// [`backward_many`], which shares one forward pass.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &Matrix,
    output_grad: &Matrix,
) -> Result<ParamVector, NetError> {
    let trace = forward_trace(spec, params, inputs)?;
    backprop(spec, params, &trace, output_grad)
}

/// Runs one forward pass, hands the predictions to `make_output_grads`, and
/// backpropagates each returned output gradient.
pub fn backward_many<F, E>(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &Matrix,
    make_output_grads: F,
) -> Result<(Matrix, Vec<ParamVector>), E>
where
    F: FnOnce(&Matrix) -> Result<Vec<Matrix>, E>,
    E: From<NetError>,
{
    let trace = forward_trace(spec, params, inputs)?;
    let preds = trace.activations.last().expect("non-empty trace");
    let grads = make_output_grads(preds)?;
    let mut out = Vec::with_capacity(grads.len());
    for g in &grads {
        out.push(backprop(spec, params, &trace, g)?);
    }
    Ok((preds.clone(), out))
}

fn backprop(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    output_grad: &Matrix,
) -> Result<ParamVector, NetError> {
    let n = trace.activations[0].rows();
    let k = spec.output_dim();
    output_grad.check_shape(n, k)?;
    let p = params.as_slice();
    let offsets = spec.layer_offsets();
    let mut grad = vec![0.0; spec.param_count()];
    let last = spec.num_layers() - 1;

    // delta = dTotal/dz for the current layer
    let out = &trace.activations[last + 1];
    let mut delta = output_grad.clone();
    match spec.output_kind {
        OutputKind::Linear => {}
        OutputKind::Sigmoid => {
            for (d, &y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *d *= y * (1.0 - y);
            }
        }
        OutputKind::Softmax => {
            for i in 0..n {
                let y = out.row(i);
                let g = output_grad.row(i);
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for (j, d) in delta.row_mut(i).iter_mut().enumerate() {
                    *d = y[j] * (g[j] - dot);
                }
            }
        }
    }

    for l in (0..=last).rev() {
        let fan_in = spec.layer_widths[l];
        let fan_out = spec.layer_widths[l + 1];
        let (wo, bo) = offsets[l];
        let prev = &trace.activations[l];
        {
            let (gw, gb) = grad[wo..bo + fan_out].split_at_mut(bo - wo);
            for i in 0..n {
                let d = delta.row(i);
                let x = prev.row(i);
                for j in 0..fan_out {
                    let dj = d[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let gwr = &mut gw[j * fan_in..(j + 1) * fan_in];
                    for (g, &xv) in gwr.iter_mut().zip(x) {
                        *g += dj * xv;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &p[wo..bo];
        let act = spec.hidden_activation;
        let mut next = Matrix::zeros(n, fan_in);
        for i in 0..n {
            let d = delta.row(i);
            let a = prev.row(i);
            let nr = next.row_mut(i);
            for j in 0..fan_out {
                let dj = d[j];
                if dj == 0.0 {
                    continue;
                }
                let wr = &w[j * fan_in..(j + 1) * fan_in];
                for (nv, &wv) in nr.iter_mut().zip(wr) {
                    *nv += dj * wv;
                }
            }
            for (nv, &av) in nr.iter_mut().zip(a) {
                *nv *= act.derivative_from_output(av);
            }
        }
        delta = next;
    }
    Ok(ParamVector(grad))
}

/// Central-difference gradient of `loss_fn` at `params`.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamVector, h: f64) -> Result<ParamVector, NetError>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(NetError::InvalidStep(h));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = loss_fn(&probe);
        probe.0[i] = orig - h;
        let down = loss_fn(&probe);
        probe.0[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NetError::NonFinite { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(ParamVector(grad))
}

/// Uniform initialization in `[-scale, scale]`, deterministic in `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64, scale: f64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..spec.param_count())
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    ParamVector(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(vec![3, 5, 4, 2], Activation::Tanh, OutputKind::Softmax).unwrap()
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn zero_params_linear_gives_zero_outputs() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu, OutputKind::Linear).unwrap();
        let params = ParamVector::zeros(spec.param_count());
        let out = forward(&spec, &params, &random_inputs(4, 3, 1)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_softmax_gives_uniform_rows() {
        let spec = MlpSpec::new(vec![3, 4], Activation::Relu, OutputKind::Softmax).unwrap();
        let params = ParamVector::zeros(spec.param_count());
        let out = forward(&spec, &params, &random_inputs(4, 3, 1)).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_unit_at_zero_preactivation() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Sigmoid, OutputKind::Sigmoid).unwrap();
        let params = ParamVector(vec![2.0, -1.0]);
        let x = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let out = forward(&spec, &params, &x).unwrap();
        assert_eq!(out.get(0, 0), 0.5);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let spec = small_spec();
        let params = init_params(&spec, 9, 0.7);
        let x = random_inputs(6, 3, 2);
        let a = forward(&spec, &params, &x).unwrap();
        let b = forward(&spec, &params, &x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn softmax_rows_on_simplex() {
        let spec = small_spec();
        let params = init_params(&spec, 4, 3.0);
        let out = forward(&spec, &params, &random_inputs(10, 3, 3)).unwrap();
        for row in out.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let spec = small_spec();
        let params = init_params(&spec, 1, 0.5);
        let err = forward(&spec, &params, &random_inputs(2, 4, 0)).unwrap_err();
        assert_eq!(
            err,
            NetError::DimensionMismatch {
                layer: 0,
                expected: 3,
                got: 4
            }
        );
        let short = ParamVector::zeros(3);
        assert!(matches!(
            forward(&spec, &short, &random_inputs(2, 3, 0)),
            Err(NetError::ParamLength { .. })
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, OutputKind::Linear).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu, OutputKind::Linear).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Relu, OutputKind::Softmax).is_err());
        assert!(MlpSpec::new(vec![3, 2], Activation::Relu, OutputKind::Sigmoid).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradient() {
        let spec = small_spec();
        let params = init_params(&spec, 5, 0.5);
        let x = random_inputs(4, 3, 5);
        let g = backward(&spec, &params, &x, &Matrix::zeros(4, 2)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_unit_gradient_is_input_and_one() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Relu, OutputKind::Linear).unwrap();
        let params = ParamVector(vec![0.3, -0.2]);
        let x = Matrix::from_vec(1, 1, vec![1.7]).unwrap();
        let g = backward(&spec, &params, &x, &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.as_slice(), &[1.7, 1.0]);
    }

    #[test]
    fn backward_matches_finite_differences_for_mse() {
        let spec = MlpSpec::new(vec![2, 4, 3, 2], Activation::Sigmoid, OutputKind::Linear).unwrap();
        let params = init_params(&spec, 11, 0.8);
        let x = random_inputs(5, 2, 12);
        let y = random_inputs(5, 2, 13);
        let n = x.rows() as f64;
        let loss = |p: &ParamVector| {
            let out = forward(&spec, p, &x).unwrap();
            out.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n
        };
        let out = forward(&spec, &params, &x).unwrap();
        let og = Matrix::from_vec(
            5,
            2,
            out.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| 2.0 * (a - b) / n)
                .collect(),
        )
        .unwrap();
        let analytic = backward(&spec, &params, &x, &og).unwrap();
        let numeric = finite_diff_grad(loss, &params, 1e-5).unwrap();
        for (a, b) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            assert!(rel <= 1e-6, "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn finite_diff_known_gradients() {
        let c = finite_diff_grad(|_| 3.0, &ParamVector(vec![1.0, 2.0]), 1e-5).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.0]);

        let sq = finite_diff_grad(
            |p| p.as_slice().iter().map(|v| v * v).sum(),
            &ParamVector(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!((sq.0[0] - 2.0).abs() < 1e-8 && (sq.0[1] - 4.0).abs() < 1e-8);

        let prod =
            finite_diff_grad(|p| p.0[0] * p.0[1], &ParamVector(vec![3.0, 5.0]), 1e-5).unwrap();
        assert!((prod.0[0] - 5.0).abs() < 1e-8 && (prod.0[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_reports_non_finite_coordinate() {
        let err = finite_diff_grad(
            |p| if p.0[1] > 2.0 { f64::NAN } else { 0.0 },
            &ParamVector(vec![0.0, 2.0]),
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err, NetError::NonFinite { coordinate: 1 });
        assert!(finite_diff_grad(|_| 0.0, &ParamVector(vec![0.0]), 0.0).is_err());
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let spec = small_spec();
        assert_eq!(init_params(&spec, 7, 0.5), init_params(&spec, 7, 0.5));
        assert_ne!(init_params(&spec, 1, 0.5), init_params(&spec, 2, 0.5));
        assert!(init_params(&spec, 3, 0.0).as_slice().iter().all(|&v| v == 0.0));
        assert!(init_params(&spec, 3, 0.5).as_slice().iter().all(|v| v.abs() <= 0.5));
    }
}
