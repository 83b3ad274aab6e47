//! Reverse-mode gradient rules for the closed op set used by the denoiser.
//!
//! Every rule takes the forward output (or the saved inputs it needs) and the
//! upstream gradient, and returns the gradient with respect to the op input.
//! Each one is exercised by `graph::grad_check` against central differences.

use super::grid::{gemm, sigmoid_scalar, Grid2D, Trans};
use crate::error::{Error, Result};

/// Gradients of `c = a · b`: returns `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward(a: &Grid2D, b: &Grid2D, dc: &Grid2D) -> Result<(Grid2D, Grid2D)> {
    let mut da = Grid2D::zeros(a.rows(), a.cols());
    let mut db = Grid2D::zeros(b.rows(), b.cols());
    gemm(1.0, dc, Trans::No, b, Trans::Yes, 0.0, &mut da)?;
    gemm(1.0, a, Trans::Yes, dc, Trans::No, 0.0, &mut db)?;
    Ok((da, db))
}

/// `acc += aᵀ · dc`, the weight gradient of `a · w`.
pub fn accumulate_weight_grad(acc: &mut Grid2D, a: &Grid2D, dc: &Grid2D) -> Result<()> {
    gemm(1.0, a, Trans::Yes, dc, Trans::No, 1.0, acc)
}

/// `acc += dc · wᵀ`, the input gradient of `a · w`.
pub fn accumulate_input_grad(acc: &mut Grid2D, dc: &Grid2D, w: &Grid2D) -> Result<()> {
    gemm(1.0, dc, Trans::No, w, Trans::Yes, 1.0, acc)
}

/// Gradient of `p = softmax_rows(m, scale)` given `p` and `dp`.
pub fn softmax_rows_backward(p: &Grid2D, dp: &Grid2D, scale: f64) -> Result<Grid2D> {
    if p.shape() != dp.shape() {
        return Err(Error::Shape {
            op: "softmax_rows_backward",
            left: p.shape(),
            right: dp.shape(),
        });
    }
    let inv = 1.0 / scale;
    let mut dm = Grid2D::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let dr = dp.row(r);
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in dm.row_mut(r).iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - dot) * inv;
        }
    }
    Ok(dm)
}

/// Gradient of `s = sigmoid(x)` given the output `s`.
pub fn sigmoid_backward(s: &Grid2D, ds: &Grid2D) -> Result<Grid2D> {
    s.zip_with(ds, "sigmoid_backward", |s, d| d * s * (1.0 - s))
}

/// `x · sigmoid(x)`.
pub fn silu(x: &Grid2D) -> Grid2D {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn silu_backward(x: &Grid2D, dy: &Grid2D) -> Result<Grid2D> {
    x.zip_with(dy, "silu_backward", |v, d| {
        let s = sigmoid_scalar(v);
        d * (s + v * s * (1.0 - s))
    })
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row standardization without affine parameters. Returns the output
/// and the per-row inverse standard deviations needed by the backward pass.
pub fn layer_norm(x: &Grid2D) -> (Grid2D, Vec<f64>) {
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mu) * is;
        }
        inv_std.push(is);
    }
    (y, inv_std)
}

/// Backward of [`layer_norm`] given its output `y` and saved inverse stds.
pub fn layer_norm_backward(y: &Grid2D, inv_std: &[f64], dy: &Grid2D) -> Result<Grid2D> {
    if y.shape() != dy.shape() || inv_std.len() != y.rows() {
        return Err(Error::Shape {
            op: "layer_norm_backward",
            left: y.shape(),
            right: dy.shape(),
        });
    }
    let n = y.cols() as f64;
    let mut dx = Grid2D::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dr = dy.row(r);
        let mean_d = dr.iter().sum::<f64>() / n;
        let mean_dy = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dr) {
            *o = inv_std[r] * (dv - mean_d - yv * mean_dy);
        }
    }
    Ok(dx)
}

/// `v / mean(v)`.
pub fn mean_normalize(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x / m).collect()
}

/// Backward of [`mean_normalize`], given the input `v`, its normalized form
/// `w` and the upstream gradient `dw`.
pub fn mean_normalize_backward(v: &[f64], w: &[f64], dw: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let coupling = dw.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (m * n);
    dw.iter().map(|d| d / m - coupling).collect()
}

/// Gradient of `mse(pred, target)` with respect to `pred`.
pub fn mse_backward(pred: &Grid2D, target: &Grid2D) -> Result<Grid2D> {
    let k = 2.0 / pred.len().max(1) as f64;
    pred.zip_with(target, "mse_backward", |p, t| k * (p - t))
}
