//! Training objectives: a correlation (trace-norm CCA) loss over raw embedding
//! batches, a KL-divergence hinge ranking loss over diagonal Gaussian
//! embeddings, and their weighted composite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::kl_diag_slices;
use crate::numerics::linalg::{self, DEFAULT_EIG_FLOOR};
use crate::numerics::{Graph, MarginConvention, Tensor, Var};

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// A diagonal Gaussian: mean vector plus per-dimension variances.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding {
    mean: Tensor,
    var: Tensor,
}

impl GaussianEmbedding {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::dim(
                "gaussian",
                format!("mean has {} dims, variance {}", mean.len(), var.len()),
            ));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("variance must be > 0, got {v}")));
        }
        Ok(Self {
            mean: Tensor::vector(mean),
            var: Tensor::vector(var),
        })
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.data()
    }

    pub fn var(&self) -> &[f64] {
        self.var.data()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Weights and hyper-parameters shared by the three losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the correlation term; `1 − lambda` weighs the ranking term.
    pub lambda: f64,
    pub alpha: f64,
    pub ridge: f64,
    /// Canonical directions kept; `None` means all `d`.
    pub k: Option<usize>,
    pub margin: MarginConvention,
    pub eig_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha: 1.0,
            ridge: DEFAULT_RIDGE,
            k: None,
            margin: MarginConvention::Loose,
            eig_floor: DEFAULT_EIG_FLOOR,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.ridge > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ridge must be > 0, got {}",
                self.ridge
            )));
        }
        let k = self.k_for(d);
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!("k = {k} outside [1, {d}]")));
        }
        Ok(())
    }

    pub fn k_for(&self, d: usize) -> usize {
        self.k.unwrap_or(d)
    }
}

/// Canonical projections recovered from batch statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaSolution {
    /// `d_m × k`.
    pub w_music: Tensor,
    /// `d_e × k`.
    pub w_emotion: Tensor,
    /// Descending.
    pub correlations: Vec<f64>,
    pub ridge: f64,
    pub batch_size: usize,
    /// Column means of the batch the solution was fitted on; subtracted before projecting.
    pub music_center: Vec<f64>,
    pub emotion_center: Vec<f64>,
}

impl CcaSolution {
    pub fn k(&self) -> usize {
        self.correlations.len()
    }

    /// `Wᵀ (x − center)` for one music embedding.
    pub fn project_music(&self, raw: &[f64]) -> Result<Vec<f64>> {
        project(&self.w_music, &self.music_center, raw)
    }

    pub fn project_emotion(&self, raw: &[f64]) -> Result<Vec<f64>> {
        project(&self.w_emotion, &self.emotion_center, raw)
    }
}

fn project(w: &Tensor, center: &[f64], raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() != w.rows() {
        return Err(Error::dim(
            "cca projection",
            format!(
                "embedding has {} dims, projection expects {}",
                raw.len(),
                w.rows()
            ),
        ));
    }
    let mut out = vec![0.0; w.cols()];
    for (i, (x, c)) in raw.iter().zip(center).enumerate() {
        let v = x - c;
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += wv * v;
        }
    }
    Ok(out)
}

/// Nodes of a correlation loss built on a graph.
pub struct CcaNodes {
    /// `−(sum of top-k singular values)`.
    pub loss: Var,
    singular: Var,
    whiten_music: Var,
    whiten_emotion: Var,
}

/// Builds `−Σ top-k σ(Σmm^{-1/2} Σme Σee^{-1/2})` on `g`.
pub fn cca_graph(g: &mut Graph, hm: Var, he: Var, cfg: &LossConfig) -> Result<CcaNodes> {
    let (n, dm, de) = {
        let (a, b) = (g.value(hm), g.value(he));
        if a.rows() != b.rows() {
            return Err(Error::Pairing(format!(
                "music batch has {} rows, emotion batch {}",
                a.rows(),
                b.rows()
            )));
        }
        (a.rows(), a.cols(), b.cols())
    };
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    cfg.validate(dm.min(de))?;
    let k = cfg.k_for(dm.min(de));
    let smm = g.covariance(hm, cfg.ridge)?;
    let see = g.covariance(he, cfg.ridge)?;
    let sme = g.cross_covariance(hm, he)?;
    let whiten_music = g.inv_sqrt_psd(smm, cfg.eig_floor)?;
    let whiten_emotion = g.inv_sqrt_psd(see, cfg.eig_floor)?;
    let left = g.matmul(whiten_music, sme)?;
    let t = g.matmul(left, whiten_emotion)?;
    let singular = g.top_singular_sum(t, k)?;
    let loss = g.scale(singular, -1.0);
    Ok(CcaNodes {
        loss,
        singular,
        whiten_music,
        whiten_emotion,
    })
}

impl CcaNodes {
    /// Projection matrices for the batch this node set was built on.
    pub fn solution(&self, g: &Graph, hm: Var, he: Var, ridge: f64) -> Result<CcaSolution> {
        let top = g
            .singular_cache(self.singular)
            .ok_or_else(|| Error::Numeric("missing singular cache".into()))?;
        let w_music = g.value(self.whiten_music).matmul(&top.left)?;
        let w_emotion = g.value(self.whiten_emotion).matmul(&top.right)?;
        let (_, music_center) = linalg::center_columns(g.value(hm));
        let (_, emotion_center) = linalg::center_columns(g.value(he));
        Ok(CcaSolution {
            w_music,
            w_emotion,
            correlations: top.values.clone(),
            ridge,
            batch_size: g.value(hm).rows(),
            music_center,
            emotion_center,
        })
    }
}

/// Correlation loss and the fitted canonical projections for `Hm: N×d`, `He: N×d`.
pub fn cca_loss(hm: &Tensor, he: &Tensor, cfg: &LossConfig) -> Result<(f64, CcaSolution)> {
    let mut g = Graph::new();
    let (m, e) = (g.constant(hm.as_matrix()), g.constant(he.as_matrix()));
    let nodes = cca_graph(&mut g, m, e, cfg)?;
    let solution = nodes.solution(&g, m, e, cfg.ridge)?;
    Ok((g.scalar(nodes.loss), solution))
}

/// `KL(g1 ‖ g2)` for diagonal Gaussians.
pub fn kl_diag(g1: &GaussianEmbedding, g2: &GaussianEmbedding) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::dim(
            "kl_diag",
            format!("{} vs {} dims", g1.dim(), g2.dim()),
        ));
    }
    Ok(kl_diag_slices(g1.mean(), g1.var(), g2.mean(), g2.var()))
}

/// Gaussian heads of a paired batch; row `n` of each music tensor pairs with row `n` of each emotion tensor.
#[derive(Clone, Copy, Debug)]
pub struct GaussianBatch {
    pub music_mean: Var,
    pub music_var: Var,
    pub emotion_mean: Var,
    pub emotion_var: Var,
}

/// Two-directional hinge ranking loss over every negative in the batch.
pub fn ranking_graph(
    g: &mut Graph,
    batch: &GaussianBatch,
    alpha: f64,
    margin: MarginConvention,
) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    let (nm, ne) = (
        g.value(batch.music_mean).rows(),
        g.value(batch.emotion_mean).rows(),
    );
    if nm != ne {
        return Err(Error::Pairing(format!(
            "{nm} music embeddings vs {ne} emotion embeddings"
        )));
    }
    let music_anchor = g.pairwise_kl(
        batch.music_mean,
        batch.music_var,
        batch.emotion_mean,
        batch.emotion_var,
    )?;
    let emotion_anchor = g.pairwise_kl(
        batch.emotion_mean,
        batch.emotion_var,
        batch.music_mean,
        batch.music_var,
    )?;
    let a = g.ranking_hinge(music_anchor, alpha, margin)?;
    let b = g.ranking_hinge(emotion_anchor, alpha, margin)?;
    g.add(a, b)
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, d: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    Tensor::matrix(data.len() / d.max(1), d, data)
}

fn gaussian_constants(
    g: &mut Graph,
    pairs: &[(GaussianEmbedding, GaussianEmbedding)],
) -> Result<GaussianBatch> {
    let d = pairs[0].0.dim();
    if pairs.iter().any(|(m, e)| m.dim() != d || e.dim() != d) {
        return Err(Error::dim("ranking_loss", "embeddings differ in dimension"));
    }
    let take = |f: fn(&(GaussianEmbedding, GaussianEmbedding)) -> &[f64]| {
        stack(pairs.iter().map(|p| f(p).to_vec()), d)
    };
    Ok(GaussianBatch {
        music_mean: g.constant(take(|p| p.0.mean())?),
        music_var: g.constant(take(|p| p.0.var())?),
        emotion_mean: g.constant(take(|p| p.1.mean())?),
        emotion_var: g.constant(take(|p| p.1.var())?),
    })
}

/// Ranking loss over `(music, emotion)` positive pairs.
pub fn ranking_loss(
    pairs: &[(GaussianEmbedding, GaussianEmbedding)],
    alpha: f64,
    margin: MarginConvention,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut g = Graph::new();
    let batch = gaussian_constants(&mut g, pairs)?;
    let loss = ranking_graph(&mut g, &batch, alpha, margin)?;
    Ok(g.scalar(loss))
}

/// Nodes of the composite loss. A term with zero weight is not built.
pub struct CompositeNodes {
    pub total: Var,
    pub cca: Option<CcaNodes>,
    pub ranking: Option<Var>,
}

/// `λ·cca + (1−λ)·ranking` on a paired batch.
pub fn composite_graph(
    g: &mut Graph,
    hm: Var,
    he: Var,
    gauss: &GaussianBatch,
    cfg: &LossConfig,
) -> Result<CompositeNodes> {
    let n = g.value(hm).rows();
    let ng = g.value(gauss.music_mean).rows();
    if n != ng || g.value(he).rows() != n || g.value(gauss.emotion_mean).rows() != n {
        return Err(Error::Pairing(format!(
            "correlation batch has {n} rows, Gaussian batch {ng}"
        )));
    }
    let d = g.value(hm).cols().min(g.value(he).cols());
    cfg.validate(d)?;
    let cca = if cfg.lambda > 0.0 {
        Some(cca_graph(g, hm, he, cfg)?)
    } else {
        None
    };
    let ranking = if cfg.lambda < 1.0 {
        Some(ranking_graph(g, gauss, cfg.alpha, cfg.margin)?)
    } else {
        None
    };
    let total = match (&cca, ranking) {
        (Some(c), Some(r)) => {
            let a = g.scale(c.loss, cfg.lambda);
            let b = g.scale(r, 1.0 - cfg.lambda);
            g.add(a, b)?
        }
        (Some(c), None) => g.scale(c.loss, cfg.lambda),
        (None, Some(r)) => g.scale(r, 1.0 - cfg.lambda),
        (None, None) => unreachable!("lambda lies in [0, 1]"),
    };
    Ok(CompositeNodes {
        total,
        cca,
        ranking,
    })
}

/// Composite loss value for raw embedding batches plus Gaussian pairs indexed the same way.
pub fn composite_loss(
    hm: &Tensor,
    he: &Tensor,
    pairs: &[(GaussianEmbedding, GaussianEmbedding)],
    cfg: &LossConfig,
) -> Result<f64> {
    if hm.rows() != pairs.len() || he.rows() != pairs.len() {
        return Err(Error::Pairing(format!(
            "{} / {} embedding rows vs {} Gaussian pairs",
            hm.rows(),
            he.rows(),
            pairs.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut g = Graph::new();
    let m = g.constant(hm.as_matrix());
    let e = g.constant(he.as_matrix());
    let gauss = gaussian_constants(&mut g, pairs)?;
    let nodes = composite_graph(&mut g, m, e, &gauss, cfg)?;
    Ok(g.scalar(nodes.total))
}
