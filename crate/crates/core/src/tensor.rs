//! Dense 2-D tensors and the named parameter store.
//!
//! Everything in this crate is a row-major matrix of f64. Row vectors are
//! 1 x n, scalars are 1 x 1. The functions here are the pure forward ops;
//! the differentiable versions live on the tape in [`crate::tape`] and share
//! these kernels, so a value computed either way is bit-identical.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Numerics layer errors. Shape errors name both shapes so a mismatch in a
/// composed model is diagnosable without a debugger.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} requires row width >= 2, got {width}")]
    RowTooNarrow { op: &'static str, width: usize },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("{0}")]
    Domain(String),
}

/// Row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            rows * cols,
            "tensor data length {} does not match {}x{}",
            values.len(),
            rows,
            cols
        );
        Tensor { rows, cols, values }
    }

    /// 1 x n row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            values,
        }
    }

    /// 1 x 1 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            values: vec![v],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// Shared forward kernels. The tape calls these too, which keeps the pure API
// and the differentiable path numerically identical.
pub(crate) mod kernels {
    /// c[m x n] = a[m x k] * b[k x n], accumulating over k in ascending order.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
    }

    /// Row-wise softmax with max subtraction. `mask[j] == false` columns get
    /// -1e9 added to the logit before normalization, which underflows to an
    /// exactly zero weight after exp.
    pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, mask: Option<&[bool]>, out: &mut [f64]) {
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let logit = |j: usize| match mask {
                Some(m) if !m[j] => row[j] - 1e9,
                _ => row[j],
            };
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                max = max.max(logit(j));
            }
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (logit(j) - max).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
    }

    pub fn sigmoid(x: f64) -> f64 {
        // Split on sign so large negative inputs underflow instead of
        // overflowing exp.
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    const GELU_C: f64 = 0.044715;

    /// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(x: f64) -> f64 {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        let inner = k * (x + GELU_C * x * x * x);
        let t = inner.tanh();
        let sech2 = 1.0 - t * t;
        0.5 * (1.0 + t) + 0.5 * x * sech2 * k * (1.0 + 3.0 * GELU_C * x * x)
    }

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    /// Row-wise layer norm followed by the elementwise affine (gain, bias).
    /// Also writes the per-row inverse std and the normalized values, which
    /// the backward pass needs.
    pub fn layer_norm(
        x: &[f64],
        rows: usize,
        cols: usize,
        gain: &[f64],
        bias: &[f64],
        out: &mut [f64],
        norm: &mut [f64],
        inv_std: &mut [f64],
    ) {
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let n = (row[j] - mean) * is;
                norm[r * cols + j] = n;
                out[r * cols + j] = n * gain[j] + bias[j];
            }
        }
    }

    pub fn huber(x: f64, delta: f64) -> f64 {
        if x.abs() <= delta {
            0.5 * x * x
        } else {
            delta * (x.abs() - 0.5 * delta)
        }
    }

    pub fn huber_grad(x: f64, delta: f64) -> f64 {
        if x.abs() <= delta {
            x
        } else {
            delta * x.signum()
        }
    }
}

/// `a[m x k] * b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    kernels::matmul(&a.values, &b.values, a.rows, a.cols, b.cols, &mut out.values);
    Ok(out)
}

/// Row-wise softmax with max subtraction; rows sum to 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    kernels::softmax_rows(&x.values, x.rows, x.cols, None, &mut out.values);
    out
}

/// Elementwise GELU (tanh approximation).
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.values {
        *v = kernels::gelu(*v);
    }
    out
}

/// Elementwise numerically stable logistic sigmoid.
pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.values {
        *v = kernels::sigmoid(*v);
    }
    out
}

/// Row-wise layer norm with elementwise affine. Rows must have width >= 2,
/// otherwise the variance is identically zero and normalization is vacuous.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    if x.cols < 2 {
        return Err(NumericsError::RowTooNarrow {
            op: "layer_norm",
            width: x.cols,
        });
    }
    if gain.shape() != (1, x.cols) {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm gain",
            lhs: x.shape(),
            rhs: gain.shape(),
        });
    }
    if bias.shape() != (1, x.cols) {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm bias",
            lhs: x.shape(),
            rhs: bias.shape(),
        });
    }
    let mut out = Tensor::zeros(x.rows, x.cols);
    let mut norm = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; x.rows];
    kernels::layer_norm(
        &x.values,
        x.rows,
        x.cols,
        &gain.values,
        &bias.values,
        &mut out.values,
        &mut norm,
        &mut inv_std,
    );
    Ok(out)
}

/// Named parameter tensors plus the seed they were initialized from.
/// Iteration order is the lexicographic name order of the underlying BTreeMap,
/// which the optimizer and the checkpoint writer both rely on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    pub tensors: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore {
            tensors: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericsError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    /// Total element count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Deterministic parameter initializer. All draws come from one ChaCha8
/// stream seeded by the store seed, in insertion call order, so a given
/// construction sequence always produces the same parameters.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, std: f64) -> f64 {
        // Box-Muller on two uniform draws; two draws per sample keeps the
        // stream advance rate fixed regardless of rejection tricks.
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    }

    /// Weight matrix with std 1/sqrt(fan_in).
    pub fn weight(&mut self, store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize) {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| self.normal(std)).collect();
        store.insert(name, Tensor::from_values(fan_in, fan_out, values));
    }

    /// Embedding table with a fixed small std.
    pub fn embedding(&mut self, store: &mut ParameterStore, name: &str, rows: usize, cols: usize, std: f64) {
        let values = (0..rows * cols).map(|_| self.normal(std)).collect();
        store.insert(name, Tensor::from_values(rows, cols, values));
    }

    pub fn zeros(&mut self, store: &mut ParameterStore, name: &str, rows: usize, cols: usize) {
        store.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn constant(&mut self, store: &mut ParameterStore, name: &str, rows: usize, cols: usize, v: f64) {
        store.insert(name, Tensor::from_values(rows, cols, vec![v; rows * cols]));
    }
}
