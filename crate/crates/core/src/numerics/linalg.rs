//! Dense symmetric linear algebra: covariances, Jacobi eigendecomposition,
//! inverse square roots and singular-value sums, plus their adjoints.

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Absolute symmetry tolerance, scaled by `max(1, max|S|)`.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues below `-PSD_TOL * max(1, max|λ|)` reject a PSD input.
pub const PSD_TOL: f64 = 1e-9;
/// Default eigenvalue floor for [`inv_sqrt_psd`].
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;
/// Eigenvector adjoints are only defined when neighbouring eigenvalues differ by more than this.
pub const EIG_GAP_MIN: f64 = 1e-8;

const MAX_SWEEPS: usize = 100;

fn column_means(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

/// Column-centred copy of `x`, with the column means.
pub fn center_columns(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mean = column_means(x);
    let mut out = x.as_matrix();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    (out, mean)
}

/// `(1/(N-1)) X̄ᵀX̄ + ridge·I` for `X: N×d`. The result is bitwise symmetric.
pub fn centered_covariance(x: &Tensor, ridge: f64) -> Result<Tensor> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if ridge < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    let (xc, _) = center_columns(x);
    let d = xc.cols();
    let scale = 1.0 / (n as f64 - 1.0);
    let xt = xc.transpose();
    let mut out = Tensor::zeros(&[d, d]);
    for a in 0..d {
        for b in a..d {
            let v = super::tensor::dot(xt.row(a), xt.row(b)) * scale;
            out.set(a, b, v);
            out.set(b, a, v);
        }
        let diag = out.at(a, a) + ridge;
        out.set(a, a, diag);
    }
    Ok(out)
}

/// `(1/(N-1)) X̄ᵀȲ` for `X: N×p`, `Y: N×q`. No ridge term.
pub fn cross_covariance(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::dim(
            "cross_covariance",
            format!("{} rows vs {} rows", n, y.rows()),
        ));
    }
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let (xc, _) = center_columns(x);
    let (yc, _) = center_columns(y);
    let xt = xc.transpose();
    let out = matmul_raw(xt.data(), yc.data(), xt.rows(), n, yc.cols());
    Ok(out.scale(1.0 / (n as f64 - 1.0)))
}

fn check_square(s: &Tensor, op: &'static str) -> Result<usize> {
    if s.shape().len() != 2 || s.rows() != s.cols() {
        return Err(Error::dim(
            op,
            format!("expected square matrix, got {:?}", s.shape()),
        ));
    }
    Ok(s.rows())
}

fn check_symmetric(s: &Tensor) -> Result<()> {
    let d = s.rows();
    let scale = s.max_abs().max(1.0);
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            worst = worst.max((s.at(i, j) - s.at(j, i)).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

/// Eigendecomposition of a real symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`; its largest-magnitude
    /// component is positive.
    pub vectors: Tensor,
}

/// Cyclic Jacobi eigensolver for symmetric `S`.
pub fn sym_eig(s: &Tensor) -> Result<SymEig> {
    let d = check_square(s, "sym_eig")?;
    check_symmetric(s)?;
    if s.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sym_eig: non-finite input".into()));
    }
    // Work on the exactly symmetrised copy.
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = 0.5 * (s.at(i, j) + s.at(j, i));
        }
    }
    let mut v = Tensor::identity(d).into_data();
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = frob == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..d {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    let np = c * akp - sn * akq;
                    let nq = sn * akp + c * akq;
                    a[k * d + p] = np;
                    a[p * d + k] = np;
                    a[k * d + q] = nq;
                    a[q * d + k] = nq;
                }
                a[p * d + p] = app - t * apq;
                a[q * d + q] = aqq + t * apq;
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - sn * vkq;
                    v[k * d + q] = sn * vkp + c * vkq;
                }
            }
        }
        let mut off = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    off += a[i * d + j] * a[i * d + j];
                }
            }
        }
        converged = off.sqrt() <= 1e-15 * frob;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "sym_eig: no convergence after {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[i * d + i].total_cmp(&a[j * d + j]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vectors = Tensor::zeros(&[d, d]);
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for k in 0..d {
            if v[k * d + src].abs() > v[pivot * d + src].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot * d + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..d {
            vectors.set(k, col, sign * v[k * d + src]);
        }
    }
    Ok(SymEig { values, vectors })
}

/// `V · diag(w) · Vᵀ`, symmetrised.
fn spectral_compose(vectors: &Tensor, weights: &[f64]) -> Tensor {
    let d = vectors.rows();
    let mut scaled = vectors.clone();
    for i in 0..d {
        for (j, w) in weights.iter().enumerate() {
            let v = scaled.at(i, j) * w;
            scaled.set(i, j, v);
        }
    }
    let vt = vectors.transpose();
    let out = matmul_raw(scaled.data(), vt.data(), d, d, d);
    symmetrize(&out)
}

pub(crate) fn symmetrize(m: &Tensor) -> Tensor {
    let d = m.rows();
    let mut out = m.clone();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (m.at(i, j) + m.at(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Adjoint of [`sym_eig`]: given upstream gradients for the eigenvalues and
/// eigenvectors, returns the (symmetric) gradient with respect to `S`.
///
/// Fails when two eigenvalues are closer than [`EIG_GAP_MIN`] and the
/// eigenvector gradient is non-zero.
pub fn sym_eig_backward(
    eig: &SymEig,
    grad_values: &[f64],
    grad_vectors: Option<&Tensor>,
) -> Result<Tensor> {
    let d = eig.values.len();
    let v = &eig.vectors;
    let mut inner = Tensor::diag(grad_values);
    if let Some(gv) = grad_vectors {
        let vt_gv = v.transpose().matmul(gv)?;
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let gap = eig.values[j] - eig.values[i];
                let x = vt_gv.at(i, j);
                if x == 0.0 {
                    continue;
                }
                if gap.abs() < EIG_GAP_MIN {
                    return Err(Error::Numeric(format!(
                        "sym_eig gradient undefined: eigenvalue gap {gap:e}"
                    )));
                }
                let cur = inner.at(i, j);
                inner.set(i, j, cur + x / gap);
            }
        }
    }
    let out = v.matmul(&inner)?.matmul(&v.transpose())?;
    Ok(symmetrize(&out))
}

fn floored_inv_sqrt(lambda: f64, floor: f64) -> f64 {
    1.0 / lambda.max(floor).sqrt()
}

/// Result of [`inv_sqrt_psd`] with the decomposition kept for the adjoint.
#[derive(Clone, Debug)]
pub struct InvSqrt {
    pub value: Tensor,
    pub eig: SymEig,
    pub floor: f64,
}

/// `V · diag(max(λ, floor))^{-1/2} · Vᵀ` for symmetric PSD `S`.
pub fn inv_sqrt_psd(s: &Tensor, floor: f64) -> Result<Tensor> {
    inv_sqrt_psd_full(s, floor).map(|r| r.value)
}

pub fn inv_sqrt_psd_full(s: &Tensor, floor: f64) -> Result<InvSqrt> {
    if floor < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "floor must be >= 0, got {floor}"
        )));
    }
    let eig = sym_eig(s)?;
    let scale = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(&lo) = eig.values.first() {
        if lo < -PSD_TOL * scale {
            return Err(Error::NotPsd(lo));
        }
        if lo.max(floor) <= 0.0 {
            return Err(Error::Numeric(
                "inv_sqrt_psd: singular matrix with zero floor".into(),
            ));
        }
    }
    let weights: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| floored_inv_sqrt(l, floor))
        .collect();
    let value = spectral_compose(&eig.vectors, &weights);
    Ok(InvSqrt { value, eig, floor })
}

/// Divided difference of `f(λ) = max(λ, floor)^{-1/2}`.
fn inv_sqrt_divided_difference(a: f64, b: f64, floor: f64) -> f64 {
    let (a_in, b_in) = (a > floor, b > floor);
    match (a_in, b_in) {
        (false, false) => 0.0,
        (true, true) => {
            let (ra, rb) = (a.sqrt(), b.sqrt());
            -1.0 / (ra * rb * (ra + rb))
        }
        _ => {
            if (a - b).abs() < f64::MIN_POSITIVE {
                0.0
            } else {
                (floored_inv_sqrt(a, floor) - floored_inv_sqrt(b, floor)) / (a - b)
            }
        }
    }
}

/// Adjoint of [`inv_sqrt_psd`] via the Daleckii-Krein formula
/// `S̄ = V (L ∘ Vᵀ Ḡ V) Vᵀ`, with `L` the divided differences of `λ^{-1/2}`.
/// Well defined for repeated eigenvalues.
pub fn inv_sqrt_psd_backward(forward: &InvSqrt, grad_out: &Tensor) -> Result<Tensor> {
    let v = &forward.eig.vectors;
    let lam = &forward.eig.values;
    let d = lam.len();
    let g = symmetrize(grad_out);
    let mut inner = v.transpose().matmul(&g)?.matmul(v)?;
    for i in 0..d {
        for j in 0..d {
            let l = inv_sqrt_divided_difference(lam[i], lam[j], forward.floor);
            let x = inner.at(i, j) * l;
            inner.set(i, j, x);
        }
    }
    let out = v.matmul(&inner)?.matmul(&v.transpose())?;
    Ok(symmetrize(&out))
}

/// Leading singular triplets of `T: r×c`, from the eigendecomposition of `TᵀT`.
#[derive(Clone, Debug)]
pub struct TopSingular {
    /// Descending.
    pub values: Vec<f64>,
    /// `r×k`; zero column where the singular value is zero.
    pub left: Tensor,
    /// `c×k`.
    pub right: Tensor,
}

pub fn top_singular(t: &Tensor, k: usize) -> Result<TopSingular> {
    let (r, c) = (t.rows(), t.cols());
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!(
            "singular value count {k} outside [1, {c}]"
        )));
    }
    let tt = t.transpose();
    let gram = symmetrize(&matmul_raw(tt.data(), t.data(), c, r, c));
    let eig = sym_eig(&gram)?;
    let mut values = Vec::with_capacity(k);
    let mut right = Tensor::zeros(&[c, k]);
    let mut left = Tensor::zeros(&[r, k]);
    for (col, src) in (0..c).rev().take(k).enumerate() {
        let sigma = eig.values[src].max(0.0).sqrt();
        values.push(sigma);
        for i in 0..c {
            right.set(i, col, eig.vectors.at(i, src));
        }
        if sigma > 0.0 {
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += t.at(i, j) * eig.vectors.at(j, src);
                }
                left.set(i, col, acc / sigma);
            }
        }
    }
    Ok(TopSingular {
        values,
        left,
        right,
    })
}

/// Sum of the `k` largest singular values of `T`.
pub fn singular_value_sum(t: &Tensor, k: usize) -> Result<f64> {
    Ok(top_singular(t, k)?.values.iter().sum())
}

/// Gradient of the top-`k` singular value sum: `U_k V_kᵀ`.
pub fn singular_value_sum_backward(top: &TopSingular) -> Tensor {
    let rt = top.right.transpose();
    matmul_raw(
        top.left.data(),
        rt.data(),
        top.left.rows(),
        top.left.cols(),
        rt.cols(),
    )
}
