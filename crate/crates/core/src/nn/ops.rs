//! Dense layer primitives with hand-written backward passes.

use super::tensor::{gemm, matmul, Tensor};
use super::{NnError, Result};

/// `y = x W + b` with `b` broadcast over rows.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(NnError::Shape {
            op: "linear_forward",
            detail: format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        });
    }
    let mut y = Tensor::zeros(&[x.rows(), w.cols()]);
    for r in 0..y.rows() {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm(x, false, w, false, &mut y, 1.0)?;
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<LinearGrads> {
    if dy.rows() != x.rows() || dy.cols() != w.cols() || x.cols() != w.rows() {
        return Err(NnError::Shape {
            op: "linear_backward",
            detail: format!("x {:?}, W {:?}, dy {:?}", x.shape(), w.shape(), dy.shape()),
        });
    }
    let dx = matmul(dy, false, w, true)?;
    let dw = matmul(x, true, dy, false)?;
    let mut db = Tensor::zeros(&[1, w.cols()]);
    for r in 0..dy.rows() {
        for (acc, v) in db.data_mut().iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let c = x.cols();
    for r in 0..x.rows() {
        softmax_in_place(&mut y.data_mut()[r * c..(r + 1) * c]);
    }
    y
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// `dx = y * (dy - sum(dy * y))` per row.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    let c = y.cols();
    for r in 0..y.rows() {
        let yr = &y.data()[r * c..(r + 1) * c];
        let gr = &dy.data()[r * c..(r + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (k, out) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
            *out = yr[k] * (gr[k] - dot);
        }
    }
    dx
}

/// Mean squared error and its gradient `2 (pred - target) / count`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape {
            op: "mse_loss",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
