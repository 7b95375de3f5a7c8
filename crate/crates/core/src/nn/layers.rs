use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::error::{contract, shape, Result};

/// `x·W + b`, with `b` broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() || w.cols() != b.len() {
        return Err(shape(
            "linear_forward",
            format!(
                "x {:?}, W {:?}, b [{}]",
                x.shape(),
                w.shape(),
                b.len()
            ),
        ));
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
            *v += bj;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Matrix,
}

pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    let dw = x.t_matmul(dy)?;
    let dx = dy.matmul_t(w)?;
    let mut db = Matrix::zeros(1, dy.cols());
    for r in dy.iter_rows() {
        for (d, v) in db.data_mut().iter_mut().zip(r) {
            *d += v;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm_forward(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape(
            "layer_norm_forward",
            format!("width {d}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + eps);
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[(i, j)] = h;
            out[(i, j)] = h * gain[j] + bias[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let (n, d) = cache.xhat.shape();
    if dy.shape() != (n, d) {
        return Err(shape(
            "layer_norm_backward",
            format!("dy {:?} vs {:?}", dy.shape(), (n, d)),
        ));
    }
    let mut dx = Matrix::zeros(n, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        for j in 0..d {
            dgain.data_mut()[j] += g[j] * xh[j];
            dbias.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[(i, j)] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgain, dbias))
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    y
}

/// Gradient through GELU given its pre-activation input.
pub fn gelu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(pre.data()) {
        *d *= gelu_grad_scalar(x);
    }
    dx
}

/// Numerically stable softmax over a slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `−log softmax(logits)[label]` and its gradient `softmax(logits) − onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(contract(
            "softmax_cross_entropy",
            format!("need at least 2 classes, got {}", logits.len()),
        ));
    }
    if label >= logits.len() {
        return Err(contract(
            "softmax_cross_entropy",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| libm::exp(z - max)).sum();
    let lse = max + libm::log(sum);
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| libm::exp(z - lse)).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}
