//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward pass.

use super::linalg::{self, InvSqrt, TopSingular};
use super::ops::{self, sigmoid_scalar, softplus_scalar};
use super::rng::RandomState;
use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which side of the hinge the margin sits on in the ranking loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginConvention {
    /// `max(0, D(pos) − α − D(neg))`: satisfied when `D(pos) ≤ α + D(neg)`.
    Loose,
    /// `max(0, D(pos) + α − D(neg))`: the usual triplet form.
    Strict,
}

enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    OneMinus(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        offsets: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Covariance(Var),
    CrossCovariance(Var, Var),
    InvSqrt {
        s: Var,
        cache: Box<InvSqrt>,
    },
    TopSingularSum {
        t: Var,
        cache: Box<TopSingular>,
    },
    PairwiseKl {
        mu1: Var,
        var1: Var,
        mu2: Var,
        var2: Var,
    },
    RankingHinge {
        d: Var,
        alpha: f64,
        convention: MarginConvention,
    },
    Sum(Var),
    MeanAbsError {
        pred: Var,
        target: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// KL divergence between diagonal Gaussians given as slices of means and variances.
#[inline]
pub(crate) fn kl_diag_slices(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    let d = mu1.len() as f64;
    let mut ratio = 0.0;
    let mut log_ratio = 0.0;
    let mut maha = 0.0;
    for k in 0..mu1.len() {
        ratio += var1[k] / var2[k];
        log_ratio += var2[k].ln() - var1[k].ln();
        let diff = mu2[k] - mu1[k];
        maha += diff * diff / var2[k];
    }
    0.5 * ((ratio - d) + log_ratio + maha)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// `X·Wᵀ (+ b)`; rank-1 `x` yields a rank-1 result.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = {
            let (xv, wv) = (self.value(x), self.value(w));
            match b {
                Some(b) => ops::affine(xv, wv, self.value(b))?,
                None => {
                    let zero = Tensor::zeros(&[wv.rows()]);
                    ops::affine(xv, wv, &zero)?
                }
            }
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Affine { x, w, b }, &parents))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::Offset(a), &[a])
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 - v);
        self.push(value, Op::OneMinus(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_scalar);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Inverted dropout. Identity (no node) outside training or at rate 0.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut RandomState,
        training: bool,
    ) -> Result<Var> {
        ops::check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).len(), rate, rng);
        let value = {
            let xv = self.value(x);
            let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean of consecutive row segments of `x` with the given lengths; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let total: usize = lengths.iter().sum();
        if total != xv.rows() || xv.shape().len() != 2 {
            return Err(Error::dim(
                "segment_mean",
                format!("segments cover {} rows, input {:?}", total, xv.shape()),
            ));
        }
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::EmptySequence("segment_mean"));
        }
        let k = xv.cols();
        let mut out = Tensor::zeros(&[lengths.len(), k]);
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        let mut start = 0;
        offsets.push(0);
        for (s, &len) in lengths.iter().enumerate() {
            let mean = ops::mean_over_time(&Tensor::matrix(
                len,
                k,
                xv.data()[start * k..(start + len) * k].to_vec(),
            )?)?;
            out.row_mut(s).copy_from_slice(mean.data());
            start += len;
            offsets.push(start);
        }
        Ok(self.push(out, Op::SegmentMean { x, offsets }, &[x]))
    }

    /// Column-wise concatenation of two matrices with equal row counts (or two vectors).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.is_vector() && bv.is_vector() {
            ops::concat(av, bv)?
        } else {
            if av.rows() != bv.rows() {
                return Err(Error::dim(
                    "concat_cols",
                    format!("{:?} vs {:?}", av.shape(), bv.shape()),
                ));
            }
            let (p, q) = (av.cols(), bv.cols());
            let mut data = Vec::with_capacity(av.rows() * (p + q));
            for i in 0..av.rows() {
                data.extend_from_slice(av.row(i));
                data.extend_from_slice(bv.row(i));
            }
            Tensor::matrix(av.rows(), p + q, data)?
        };
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn covariance(&mut self, x: Var, ridge: f64) -> Result<Var> {
        let value = linalg::centered_covariance(self.value(x), ridge)?;
        Ok(self.push(value, Op::Covariance(x), &[x]))
    }

    pub fn cross_covariance(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = linalg::cross_covariance(self.value(x), self.value(y))?;
        Ok(self.push(value, Op::CrossCovariance(x, y), &[x, y]))
    }

    pub fn inv_sqrt_psd(&mut self, s: Var, floor: f64) -> Result<Var> {
        let cache = linalg::inv_sqrt_psd_full(self.value(s), floor)?;
        let value = cache.value.clone();
        Ok(self.push(
            value,
            Op::InvSqrt {
                s,
                cache: Box::new(cache),
            },
            &[s],
        ))
    }

    /// Sum of the `k` largest singular values, as a rank-1 scalar.
    pub fn top_singular_sum(&mut self, t: Var, k: usize) -> Result<Var> {
        let cache = linalg::top_singular(self.value(t), k)?;
        let value = Tensor::scalar(cache.values.iter().sum());
        Ok(self.push(
            value,
            Op::TopSingularSum {
                t,
                cache: Box::new(cache),
            },
            &[t],
        ))
    }

    /// Cached singular triplets of a [`Graph::top_singular_sum`] node.
    pub fn singular_cache(&self, v: Var) -> Option<&TopSingular> {
        match &self.nodes[v.0].op {
            Op::TopSingularSum { cache, .. } => Some(cache),
            _ => None,
        }
    }

    /// `D[i][j] = KL(N(mu1_i, var1_i) ‖ N(mu2_j, var2_j))` for row batches of diagonal Gaussians.
    pub fn pairwise_kl(&mut self, mu1: Var, var1: Var, mu2: Var, var2: Var) -> Result<Var> {
        let (m1, v1, m2, v2) = (
            self.value(mu1).as_matrix(),
            self.value(var1).as_matrix(),
            self.value(mu2).as_matrix(),
            self.value(var2).as_matrix(),
        );
        if m1.shape() != v1.shape() || m2.shape() != v2.shape() || m1.cols() != m2.cols() {
            return Err(Error::dim(
                "pairwise_kl",
                format!(
                    "mu1 {:?} var1 {:?} mu2 {:?} var2 {:?}",
                    m1.shape(),
                    v1.shape(),
                    m2.shape(),
                    v2.shape()
                ),
            ));
        }
        if v1
            .data()
            .iter()
            .chain(v2.data())
            .any(|&v| v <= 0.0 || v.is_nan())
        {
            return Err(Error::Domain("variances must be strictly positive".into()));
        }
        let (n1, n2, d) = (m1.rows(), m2.rows(), m1.cols());
        let log_sum = |v: &Tensor| -> Vec<f64> {
            (0..v.rows())
                .map(|r| v.row(r).iter().map(|x| x.ln()).sum())
                .collect()
        };
        let (log1, log2) = (log_sum(&v1), log_sum(&v2));
        let inv2 = v2.map(|x| 1.0 / x);
        let mut out = Vec::with_capacity(n1 * n2);
        for i in 0..n1 {
            let (mi, vi) = (m1.row(i), v1.row(i));
            for j in 0..n2 {
                let (mj, ij) = (m2.row(j), inv2.row(j));
                let mut acc = 0.0;
                for k in 0..d {
                    let diff = mj[k] - mi[k];
                    acc += (vi[k] + diff * diff) * ij[k];
                }
                out.push(0.5 * (acc - d as f64 + log2[j] - log1[i]));
            }
        }
        let out = Tensor::matrix(n1, n2, out)?;
        Ok(self.push(
            out,
            Op::PairwiseKl {
                mu1,
                var1,
                mu2,
                var2,
            },
            &[mu1, var1, mu2, var2],
        ))
    }

    /// Sum over anchors `n` and negatives `n' ≠ n` of the hinge on a square
    /// distance matrix whose diagonal holds the positive-pair distances.
    pub fn ranking_hinge(
        &mut self,
        d: Var,
        alpha: f64,
        convention: MarginConvention,
    ) -> Result<Var> {
        let dv = self.value(d);
        if dv.shape().len() != 2 || dv.rows() != dv.cols() {
            return Err(Error::dim("ranking_hinge", format!("{:?}", dv.shape())));
        }
        let mut total = 0.0;
        for_each_active_hinge(dv, alpha, convention, |_, _, m| total += m);
        Ok(self.push(
            Tensor::scalar(total),
            Op::RankingHinge {
                d,
                alpha,
                convention,
            },
            &[d],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean over all entries of `|pred − target|`.
    pub fn mean_abs_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mean_abs_error", self.value(pred), self.value(target))?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.len().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::MeanAbsError { pred, target },
            &[pred, target],
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, m, k) = (xv.rows(), wv.rows(), wv.cols());
                if self.needs(*x) {
                    let dx = matmul_raw(g.data(), wv.data(), n, m, k);
                    let dx = Tensor::new(xv.shape().to_vec(), dx.into_data())?;
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(&[m, k]);
                    for i in 0..n {
                        let xr = xv.row(i);
                        let gr = &g.data()[i * m..(i + 1) * m];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            for (d, xval) in dw.row_mut(o).iter_mut().zip(xr) {
                                *d += go * xval;
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; m];
                        for i in 0..n {
                            for (d, gv) in db.iter_mut().zip(&g.data()[i * m..(i + 1) * m]) {
                                *d += gv;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::vector(db));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = g.matmul(&bv.transpose())?;
                    self.accumulate(grads, *a, da.reshape(av.shape())?);
                }
                if self.needs(*b) {
                    let db = av.as_matrix().transpose().matmul(&g.as_matrix())?;
                    self.accumulate(grads, *b, db.reshape(bv.shape())?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::OneMinus(a) => self.accumulate(grads, *a, g.scale(-1.0)),
            Op::Softplus(a) => {
                let da = zip(g, self.value(*a), |gv, x| gv * sigmoid_scalar(x));
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = zip(g, &node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = zip(g, &node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, da);
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SegmentMean { x, offsets } => {
                let xv = self.value(*x);
                let k = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let inv = 1.0 / (hi - lo) as f64;
                    let gs = &g.data()[s * k..(s + 1) * k];
                    for r in lo..hi {
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(gs) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let p = av.cols();
                let q = bv.cols();
                let gm = g.as_matrix();
                let ga = gm.cols_slice(0, p).reshape(av.shape())?;
                let gb = gm.cols_slice(p, q).reshape(bv.shape())?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Covariance(x) => {
                let (xc, _) = linalg::center_columns(self.value(*x));
                let n = xc.rows() as f64;
                let sym = zip(g, &g.transpose(), |a, b| a + b);
                let dx = xc.matmul(&sym)?.scale(1.0 / (n - 1.0));
                self.accumulate(grads, *x, dx);
            }
            Op::CrossCovariance(x, y) => {
                let (xc, _) = linalg::center_columns(self.value(*x));
                let (yc, _) = linalg::center_columns(self.value(*y));
                let scale = 1.0 / (xc.rows() as f64 - 1.0);
                if self.needs(*x) {
                    let dx = yc.matmul(&g.transpose())?.scale(scale);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*y) {
                    let dy = xc.matmul(g)?.scale(scale);
                    self.accumulate(grads, *y, dy);
                }
            }
            Op::InvSqrt { s, cache } => {
                let ds = linalg::inv_sqrt_psd_backward(cache, g)?;
                self.accumulate(grads, *s, ds);
            }
            Op::TopSingularSum { t, cache } => {
                let dt = linalg::singular_value_sum_backward(cache).scale(g.item());
                self.accumulate(grads, *t, dt);
            }
            Op::PairwiseKl {
                mu1,
                var1,
                mu2,
                var2,
            } => {
                let (m1, v1, m2, v2) = (
                    self.value(*mu1),
                    self.value(*var1),
                    self.value(*mu2),
                    self.value(*var2),
                );
                let d = m1.cols();
                let (n1, n2) = (m1.rows(), m2.rows());
                let mut dm1 = vec![0.0; n1 * d];
                let mut dv1 = vec![0.0; n1 * d];
                let mut dm2 = vec![0.0; n2 * d];
                let mut dv2 = vec![0.0; n2 * d];
                let inv1 = v1.map(|x| 1.0 / x);
                let inv2 = v2.map(|x| 1.0 / x);
                for i in 0..n1 {
                    let (mi, vi, ii) = (m1.row(i), v1.row(i), inv1.row(i));
                    for j in 0..n2 {
                        let gij = g.data()[i * n2 + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let (mj, ij) = (m2.row(j), inv2.row(j));
                        let half = 0.5 * gij;
                        for k in 0..d {
                            let (a, b) = (i * d + k, j * d + k);
                            let diff = mj[k] - mi[k];
                            let gm = gij * diff * ij[k];
                            dm1[a] -= gm;
                            dm2[b] += gm;
                            dv1[a] += half * (ij[k] - ii[k]);
                            dv2[b] += half * (ij[k] - (vi[k] + diff * diff) * ij[k] * ij[k]);
                        }
                    }
                }
                self.accumulate(grads, *mu1, Tensor::new(m1.shape().to_vec(), dm1)?);
                self.accumulate(grads, *var1, Tensor::new(v1.shape().to_vec(), dv1)?);
                self.accumulate(grads, *mu2, Tensor::new(m2.shape().to_vec(), dm2)?);
                self.accumulate(grads, *var2, Tensor::new(v2.shape().to_vec(), dv2)?);
            }
            Op::RankingHinge {
                d,
                alpha,
                convention,
            } => {
                let dv = self.value(*d);
                let n = dv.rows();
                let gs = g.item();
                let mut dd = Tensor::zeros(&[n, n]);
                for_each_active_hinge(dv, *alpha, *convention, |a, neg, _| {
                    let cur = dd.at(a, a);
                    dd.set(a, a, cur + gs);
                    let cur = dd.at(a, neg);
                    dd.set(a, neg, cur - gs);
                });
                self.accumulate(grads, *d, dd);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()));
            }
            Op::MeanAbsError { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g.item() / p.len().max(1) as f64;
                let dp = zip(p, t, |a, b| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        0.0
                    }
                });
                if self.needs(*target) {
                    self.accumulate(grads, *target, dp.scale(-1.0));
                }
                self.accumulate(grads, *pred, dp);
            }
        }
        Ok(())
    }
}

/// Calls `f(anchor, negative, violation)` for every strictly positive hinge term.
fn for_each_active_hinge(
    d: &Tensor,
    alpha: f64,
    convention: MarginConvention,
    mut f: impl FnMut(usize, usize, f64),
) {
    let n = d.rows();
    let shift = match convention {
        MarginConvention::Loose => -alpha,
        MarginConvention::Strict => alpha,
    };
    for a in 0..n {
        let pos = d.at(a, a);
        for neg in 0..n {
            if neg == a {
                continue;
            }
            let v = pos + shift - d.at(a, neg);
            if v > 0.0 {
                f(a, neg, v);
            }
        }
    }
}
