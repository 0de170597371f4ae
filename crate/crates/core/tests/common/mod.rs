//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub mod schema;

use std::path::PathBuf;

use mer_core::numerics::RandomState;
use mer_core::trainer::TrainConfig;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The shipped synthetic benchmark configuration.
pub fn benchmark_config() -> TrainConfig {
    TrainConfig::read(&workspace_root().join("configs/synthetic.cfg")).expect("benchmark config")
}

/// A configuration small enough for end-to-end plumbing tests.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("synth_n", "40"),
        ("epochs", "4"),
        ("sessions", "2"),
        ("embed_dim", "4"),
        ("music_layers", "8,8"),
        ("emotion_layers", "8,8"),
        ("music_hidden", "4"),
        ("emotion_hidden", "4"),
        ("synth_min_len", "3"),
        ("synth_max_len", "6"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// KL between full-covariance Gaussians, via Cholesky solves and log-determinants.
pub fn kl_full(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> f64 {
    let d = mu1.len() as f64;
    let c2 = s2.clone().cholesky().expect("s2 positive definite");
    let c1 = s1.clone().cholesky().expect("s1 positive definite");
    let trace = c2.solve(s1).trace();
    let diff = mu2 - mu1;
    let maha = diff.dot(&c2.solve(&diff));
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    0.5 * (trace + maha - d + logdet(&c2.l()) - logdet(&c1.l()))
}

/// Monte-Carlo estimate of KL(p‖q) for diagonal Gaussians: mean of `log p(x) − log q(x)` over `x ~ p`.
pub fn kl_monte_carlo(
    mu1: &[f64],
    var1: &[f64],
    mu2: &[f64],
    var2: &[f64],
    draws: usize,
    rng: &mut RandomState,
) -> f64 {
    let log_density = |x: &[f64], mu: &[f64], var: &[f64]| -> f64 {
        x.iter()
            .zip(mu)
            .zip(var)
            .map(|((x, m), v)| {
                -0.5 * ((x - m) * (x - m) / v + v.ln() + (2.0 * std::f64::consts::PI).ln())
            })
            .sum()
    };
    let mut x = vec![0.0; mu1.len()];
    let mut total = 0.0;
    for _ in 0..draws {
        for i in 0..x.len() {
            x[i] = mu1[i] + var1[i].sqrt() * rng.normal();
        }
        total += log_density(&x, mu1, var1) - log_density(&x, mu2, var2);
    }
    total / draws as f64
}

fn covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    let ca = a - DMatrix::from_fn(a.nrows(), a.ncols(), |_, j| a.column(j).mean());
    let cb = b - DMatrix::from_fn(b.nrows(), b.ncols(), |_, j| b.column(j).mean());
    ca.transpose() * cb / (n - 1.0)
}

/// Canonical correlations from the generalized eigenproblem
/// `Σ_xy Σ_yy⁻¹ Σ_yx a = ρ² Σ_xx a`, reduced to a symmetric one with the Cholesky factor of `Σ_xx`.
pub fn canonical_correlations(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Vec<f64> {
    let sxx = covariance(x, x) + DMatrix::identity(x.ncols(), x.ncols()) * ridge;
    let syy = covariance(y, y) + DMatrix::identity(y.ncols(), y.ncols()) * ridge;
    let sxy = covariance(x, y);
    let lx = sxx.cholesky().expect("Σxx positive definite").l();
    let lx_inv = lx.clone().try_inverse().expect("invertible factor");
    let syy_inv_syx = syy
        .cholesky()
        .expect("Σyy positive definite")
        .solve(&sxy.transpose());
    let m = &lx_inv * &sxy * syy_inv_syx * lx_inv.transpose();
    let sym = (&m + m.transpose()) * 0.5;
    let mut rho: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    rho.sort_by(|a, b| b.total_cmp(a));
    rho
}

/// `1 + #{j : sims[j] > sims[truth]}`, counted with a plain loop.
pub fn brute_rank(sims: &[f64], truth: usize) -> usize {
    let mut rank = 1;
    for j in 0..sims.len() {
        if sims[j] > sims[truth] {
            rank += 1;
        }
    }
    rank
}

/// Descending order with ties in input order, by insertion sort.
pub fn brute_order(sims: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(sims.len());
    for i in 0..sims.len() {
        let pos = out
            .iter()
            .position(|&j| sims[j] < sims[i])
            .unwrap_or(out.len());
        out.insert(pos, i);
    }
    out
}

pub fn brute_mrr(ranks: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in ranks {
        total += 1.0 / *r as f64;
    }
    total / ranks.len() as f64
}

pub fn brute_ar(ranks: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in ranks {
        total += *r as f64;
    }
    total / ranks.len() as f64
}
