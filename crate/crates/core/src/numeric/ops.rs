//! Forward-only dense kernels.
//!
//! These are the reference implementations used at inference time and by
//! the tests; the differentiable versions live on [`super::Tape`] and are
//! checked against them.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// `x W + b`, with `b` broadcast over rows.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    if b.len() != w.cols() {
        return Err(Error::shape(format!(
            "affine bias has {} entries, weight has {} columns",
            b.len(),
            w.cols()
        )));
    }
    let mut out = x.matmul(w)?;
    for i in 0..out.rows() {
        for (o, bv) in out.row_mut(i).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: &Tensor2) -> Tensor2 {
    x.map(sigmoid_scalar)
}

pub fn elementwise_mul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    a.zip_map(b, |x, y| x * y)
}

/// Log-sum-exp over the finite entries of `row`; `None` when every entry is `-inf`.
pub fn log_sum_exp(row: &[f64]) -> Option<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    Some(max + sum.ln())
}

pub(crate) fn softmax_row_into(row: &[f64], out: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("softmax row is entirely masked"));
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = if v == f64::NEG_INFINITY {
            0.0
        } else {
            (v - max).exp()
        };
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Row-wise softmax; `-inf` entries are masked and receive probability 0.
pub fn softmax_rowwise(x: &Tensor2) -> Result<Tensor2> {
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        softmax_row_into(x.row(i), out.row_mut(i))?;
    }
    Ok(out)
}

/// `softmax(q k^T / sqrt(d) + bias) v`.
///
/// `bias[i][j] = -inf` masks key `j` for query `i`.
pub fn masked_attention(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    bias: &Tensor2,
) -> Result<Tensor2> {
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "attention: query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "attention: {} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    if bias.shape() != (q.rows(), k.rows()) {
        return Err(Error::shape(format!(
            "attention bias {:?}, expected {:?}",
            bias.shape(),
            (q.rows(), k.rows())
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_nt(k)?;
    for (s, b) in scores.data_mut().iter_mut().zip(bias.data()) {
        *s = *s * scale + b;
    }
    softmax_rowwise(&scores)?.matmul(v)
}

/// Additive bias for causal attention with a linear temporal decay:
/// `-beta (i - j)` for `j <= i`, `-inf` for `j > i`.
///
/// With `window = Some(k)`, keys older than `i - k + 1` are masked as well.
pub fn causal_decay_bias(n: usize, beta: f64, window: Option<usize>) -> Tensor2 {
    let mut bias = Tensor2::filled(n, n, f64::NEG_INFINITY);
    for i in 0..n {
        let lo = window.map_or(0, |k| (i + 1).saturating_sub(k));
        for j in lo..=i {
            bias.set(i, j, -beta * (i - j) as f64);
        }
    }
    bias
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::invalid("cross entropy needs at least two classes"));
    }
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} classes",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits).ok_or_else(|| Error::invalid("all logits masked"))?;
    Ok(lse - logits[target])
}
