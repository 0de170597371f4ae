//! Forward-only elementwise and layer primitives. The differentiable versions
//! live on [`Graph`](super::Graph) and share these kernels.

use super::rng::RandomState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
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

/// `W·x + b` for `x: [n]` or a row batch `x: [N×n]`, with `W: [m×n]`, `b: [m]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_affine(x, w, b)?;
    let (n, m) = (x.rows(), w.rows());
    let wt = w.transpose();
    let mut out = super::tensor::matmul_raw(x.data(), wt.data(), n, w.cols(), m).into_data();
    for row in out.chunks_exact_mut(m.max(1)) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    if x.is_vector() {
        Ok(Tensor::vector(out))
    } else {
        Tensor::matrix(n, m, out)
    }
}

pub(crate) fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    if w.shape().len() != 2 || w.cols() != x.cols() || b.len() != w.rows() || !b.is_vector() {
        return Err(Error::dim(
            "affine",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RandomState) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

pub fn dropout(x: &Tensor, rate: f64, rng: &mut RandomState, training: bool) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok(out)
}

/// Column-wise mean of a `T×k` sequence.
pub fn mean_over_time(seq: &Tensor) -> Result<Tensor> {
    let t = seq.rows();
    if t == 0 {
        return Err(Error::EmptySequence("mean_over_time"));
    }
    let k = seq.cols();
    let mut acc = vec![0.0; k];
    for i in 0..t {
        for (a, v) in acc.iter_mut().zip(seq.row(i)) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= t as f64;
    }
    Ok(Tensor::vector(acc))
}

/// `a` followed by `b`, both rank-1.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_vector() || !b.is_vector() {
        return Err(Error::dim(
            "concat",
            format!("expected vectors, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let mut v = a.data().to_vec();
    v.extend_from_slice(b.data());
    Ok(Tensor::vector(v))
}
