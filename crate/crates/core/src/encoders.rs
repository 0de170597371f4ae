//! Music and emotion sequence encoders (mean-pooled MLP and bidirectional GRU)
//! and the three projection heads producing the correlation embedding, the
//! Gaussian mean and the Gaussian variance.

use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{CcaSolution, GaussianEmbedding};
use crate::numerics::{Graph, RandomState, Tensor, Var};

/// Added to the softplus output of the variance head.
pub const VARIANCE_FLOOR: f64 = 1e-6;

pub const CHECKPOINT_FORMAT: &str = "mer-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mlp,
    Bigru,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "bigru" => Ok(Self::Bigru),
            other => Err(Error::Config(format!(
                "unknown encoder '{other}' (expected mlp or bigru)"
            ))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Bigru => "bigru",
        })
    }
}

/// Shape of one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub kind: EncoderKind,
    pub input_width: usize,
    /// Per-direction recurrent state width; unused by the MLP.
    pub hidden_width: usize,
    pub fc_widths: Vec<usize>,
    /// Applied after every fully connected layer but the last.
    pub dropout: f64,
    /// Leave the last layer without softplus (regression outputs).
    #[serde(default)]
    pub linear_output: bool,
}

impl EncoderArch {
    pub fn full_scale_mlp(input_width: usize) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_width,
            hidden_width: 0,
            fc_widths: vec![256, 512, 512, 1024, 1024],
            dropout: 0.5,
            linear_output: false,
        }
    }

    pub fn full_scale_bigru(input_width: usize) -> Self {
        Self {
            kind: EncoderKind::Bigru,
            input_width,
            hidden_width: 512,
            fc_widths: vec![512, 512, 512, 1024, 1024],
            dropout: 0.5,
            linear_output: false,
        }
    }

    pub fn output_width(&self) -> usize {
        self.fc_widths.last().copied().unwrap_or(match self.kind {
            EncoderKind::Mlp => self.input_width,
            EncoderKind::Bigru => 2 * self.hidden_width,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::Config("encoder input width must be >= 1".into()));
        }
        if self.kind == EncoderKind::Bigru && self.hidden_width == 0 {
            return Err(Error::Config("recurrent hidden width must be >= 1".into()));
        }
        if self.fc_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "layer widths must be >= 1, got {:?}",
                self.fc_widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Both encoders plus the shared embedding width `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub music: EncoderArch,
    pub emotion: EncoderArch,
    pub embed_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered parameter storage. Order is registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(NamedParam {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Every parameter value, concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::dim(
                "set_flat",
                format!(
                    "{} values for {} parameters",
                    flat.len(),
                    self.scalar_count()
                ),
            ));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Registers every parameter as a gradient-receiving leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        )
    }

    /// Same as [`bind`](Self::bind) but without gradients, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        )
    }
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

fn uniform_weights(rows: usize, cols: usize, rng: &mut RandomState) -> Tensor {
    let a = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// `y = W x + b` with `W: out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut RandomState,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_weights(output, input, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.affine(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Gated recurrent cell: sigmoid update/reset gates and a tanh candidate.
#[derive(Clone, Debug)]
pub struct GruCell {
    w_update: ParamId,
    u_update: ParamId,
    b_update: ParamId,
    w_reset: ParamId,
    u_reset: ParamId,
    b_reset: ParamId,
    w_cand: ParamId,
    u_cand: ParamId,
    b_cand: ParamId,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut RandomState,
    ) -> Self {
        let mut gate = |gate: &str, rng: &mut RandomState| {
            (
                store.add(
                    format!("{name}.{gate}.input"),
                    uniform_weights(hidden, input, rng),
                ),
                store.add(
                    format!("{name}.{gate}.state"),
                    uniform_weights(hidden, hidden, rng),
                ),
                store.add(format!("{name}.{gate}.bias"), Tensor::zeros(&[hidden])),
            )
        };
        let (w_update, u_update, b_update) = gate("update", rng);
        let (w_reset, u_reset, b_reset) = gate("reset", rng);
        let (w_cand, u_cand, b_cand) = gate("candidate", rng);
        Self {
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_cand,
            u_cand,
            b_cand,
        }
    }

    /// One step for a row batch: `x: N×k`, `h: N×hidden`.
    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let gate = |w: ParamId, u: ParamId, b: ParamId, state: Var, g: &mut Graph| {
            let a = g.affine(x, p[w], Some(p[b]))?;
            let c = g.affine(state, p[u], None)?;
            g.add(a, c)
        };
        let pre_z = gate(self.w_update, self.u_update, self.b_update, h, g)?;
        let z = g.sigmoid(pre_z);
        let pre_r = gate(self.w_reset, self.u_reset, self.b_reset, h, g)?;
        let r = g.sigmoid(pre_r);
        let rh = g.mul(r, h)?;
        let pre_n = gate(self.w_cand, self.u_cand, self.b_cand, rh, g)?;
        let n = g.tanh(pre_n);
        let keep_new = g.one_minus(z);
        let a = g.mul(keep_new, n)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }

    fn swap_with(&mut self, other: &mut GruCell) {
        std::mem::swap(self, other);
    }
}

/// Fully connected softplus layers with dropout between them.
#[derive(Clone, Debug)]
struct FcStack {
    layers: Vec<Linear>,
    dropout: f64,
    linear_output: bool,
}

impl FcStack {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        arch: &EncoderArch,
        rng: &mut RandomState,
    ) -> Self {
        let mut width = input;
        let layers = arch
            .fc_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(store, &format!("{name}.fc{i}"), width, w, rng);
                width = w;
                l
            })
            .collect();
        Self {
            layers,
            dropout: arch.dropout,
            linear_output: arch.linear_output,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        rng: &mut RandomState,
        training: bool,
    ) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last || !self.linear_output {
                x = g.softplus(x);
            }
            if i < last {
                x = g.dropout(x, self.dropout, rng, training)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Mlp,
    Bigru { forward: GruCell, backward: GruCell },
}

/// A sequence encoder producing the high-level feature `f̂`.
#[derive(Clone, Debug)]
pub struct Encoder {
    arch: EncoderArch,
    body: Body,
    fc: FcStack,
}

impl Encoder {
    /// Registers and initializes the encoder's parameters under `name`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        arch: &EncoderArch,
        rng: &mut RandomState,
    ) -> Result<Self> {
        arch.validate()?;
        let (body, fc_input) = match arch.kind {
            EncoderKind::Mlp => (Body::Mlp, arch.input_width),
            EncoderKind::Bigru => {
                let h = arch.hidden_width;
                let forward = GruCell::new(
                    store,
                    &format!("{name}.gru.forward"),
                    arch.input_width,
                    h,
                    rng,
                );
                let backward = GruCell::new(
                    store,
                    &format!("{name}.gru.backward"),
                    arch.input_width,
                    h,
                    rng,
                );
                (Body::Bigru { forward, backward }, 2 * h)
            }
        };
        let fc = FcStack::new(store, name, fc_input, arch, rng);
        Ok(Self {
            arch: arch.clone(),
            body,
            fc,
        })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    fn check_inputs(&self, seqs: &[&Tensor]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        for s in seqs {
            if s.rows() == 0 || s.is_empty() {
                return Err(Error::EmptySequence("encoder input"));
            }
            if s.cols() != self.arch.input_width {
                return Err(Error::Config(format!(
                    "sequence width {} does not match encoder input width {}",
                    s.cols(),
                    self.arch.input_width
                )));
            }
        }
        Ok(())
    }

    /// Pooled representation before the fully connected layers, one row per sequence.
    pub fn pooled(&self, g: &mut Graph, p: &Bound, seqs: &[&Tensor]) -> Result<Var> {
        self.check_inputs(seqs)?;
        match &self.body {
            Body::Mlp => {
                let k = self.arch.input_width;
                let mut data = Vec::new();
                let lengths: Vec<usize> = seqs.iter().map(|s| s.rows()).collect();
                for s in seqs {
                    data.extend_from_slice(s.data());
                }
                let frames = g.constant(Tensor::matrix(data.len() / k, k, data)?);
                g.segment_mean(frames, &lengths)
            }
            Body::Bigru { forward, backward } => {
                let hf = run_direction(g, p, forward, seqs, false, self.arch.hidden_width)?;
                let hb = run_direction(g, p, backward, seqs, true, self.arch.hidden_width)?;
                g.concat_cols(hf, hb)
            }
        }
    }

    /// `f̂` for a batch of sequences: `N × output_width`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        seqs: &[&Tensor],
        rng: &mut RandomState,
        training: bool,
    ) -> Result<Var> {
        let pooled = self.pooled(g, p, seqs)?;
        self.fc.forward(g, p, pooled, rng, training)
    }

    /// Same as [`forward`](Self::forward) with pooled input supplied by the caller.
    pub fn forward_pooled(
        &self,
        g: &mut Graph,
        p: &Bound,
        pooled: Var,
        rng: &mut RandomState,
        training: bool,
    ) -> Result<Var> {
        self.fc.forward(g, p, pooled, rng, training)
    }

    /// `f̂` for one sequence, outside training.
    pub fn encode(&self, store: &ParamStore, seq: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let mut rng = RandomState::new(0);
        let out = self.forward(&mut g, &p, &[seq], &mut rng, false)?;
        Ok(Tensor::vector(g.value(out).data().to_vec()))
    }

    /// Exchanges the forward and backward cells (no-op for the MLP).
    pub fn swap_directions(&mut self) {
        if let Body::Bigru { forward, backward } = &mut self.body {
            forward.swap_with(backward);
        }
    }

    /// Parameters of the first fully connected layer.
    pub fn first_layer(&self) -> Option<&Linear> {
        self.fc.layers.first()
    }
}

/// Runs one recurrent direction over a padded batch; returns each sequence's final state.
fn run_direction(
    g: &mut Graph,
    p: &Bound,
    cell: &GruCell,
    seqs: &[&Tensor],
    reversed: bool,
    hidden: usize,
) -> Result<Var> {
    let n = seqs.len();
    let k = seqs[0].cols();
    let steps = seqs.iter().map(|s| s.rows()).max().unwrap_or(0);
    let mut h = g.constant(Tensor::zeros(&[n, hidden]));
    for t in 0..steps {
        let mut x = Tensor::zeros(&[n, k]);
        let mut ragged = false;
        let mut mask = Tensor::zeros(&[n, hidden]);
        for (i, s) in seqs.iter().enumerate() {
            let len = s.rows();
            if t < len {
                let src = if reversed { len - 1 - t } else { t };
                x.row_mut(i).copy_from_slice(s.row(src));
                mask.row_mut(i).fill(1.0);
            } else {
                ragged = true;
            }
        }
        let xv = g.constant(x);
        let next = cell.step(g, p, xv, h)?;
        h = if ragged {
            let hold = mask.map(|m| 1.0 - m);
            let (mv, hv) = (g.constant(mask), g.constant(hold));
            let a = g.mul(mv, next)?;
            let b = g.mul(hv, h)?;
            g.add(a, b)?
        } else {
            next
        };
    }
    Ok(h)
}

/// The three projection heads sharing input `f̂`.
#[derive(Clone, Debug)]
pub struct Heads {
    pub embed: Linear,
    pub mean: Linear,
    pub var: Linear,
}

/// Head outputs for a batch: each `N × d`.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub raw: Var,
    pub mean: Var,
    pub var: Var,
}

impl Heads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        embed_dim: usize,
        rng: &mut RandomState,
    ) -> Self {
        Self {
            embed: Linear::new(store, &format!("{name}.head.embed"), input, embed_dim, rng),
            mean: Linear::new(store, &format!("{name}.head.mean"), input, embed_dim, rng),
            var: Linear::new(store, &format!("{name}.head.var"), input, embed_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, feature: Var) -> Result<HeadNodes> {
        let raw = self.embed.forward(g, p, feature)?;
        let mean = self.mean.forward(g, p, feature)?;
        let pre = self.var.forward(g, p, feature)?;
        let soft = g.softplus(pre);
        let var = g.offset(soft, VARIANCE_FLOOR);
        Ok(HeadNodes { raw, mean, var })
    }
}

/// Encoder plus heads for one modality.
#[derive(Clone, Debug)]
pub struct Tower {
    pub encoder: Encoder,
    pub heads: Heads,
}

/// Batch nodes of one tower.
#[derive(Clone, Copy, Debug)]
pub struct TowerNodes {
    pub feature: Var,
    pub heads: HeadNodes,
}

impl Tower {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        arch: &EncoderArch,
        embed_dim: usize,
        rng: &mut RandomState,
    ) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        let encoder = Encoder::new(store, name, arch, rng)?;
        let heads = Heads::new(store, name, arch.output_width(), embed_dim, rng);
        Ok(Self { encoder, heads })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        seqs: &[&Tensor],
        rng: &mut RandomState,
        training: bool,
    ) -> Result<TowerNodes> {
        let feature = self.encoder.forward(g, p, seqs, rng, training)?;
        let heads = self.heads.forward(g, p, feature)?;
        Ok(TowerNodes { feature, heads })
    }

    /// Inference-mode outputs for every sequence.
    pub fn infer(&self, store: &ParamStore, seqs: &[&Tensor]) -> Result<Vec<EncoderOutput>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let mut rng = RandomState::new(0);
        let nodes = self.forward(&mut g, &p, seqs, &mut rng, false)?;
        collect_outputs(&g, &nodes)
    }
}

/// Per-sample encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub feature: Vec<f64>,
    pub raw: Vec<f64>,
    pub gaussian: GaussianEmbedding,
}

pub fn collect_outputs(g: &Graph, nodes: &TowerNodes) -> Result<Vec<EncoderOutput>> {
    let (f, r, m, v) = (
        g.value(nodes.feature).as_matrix(),
        g.value(nodes.heads.raw).as_matrix(),
        g.value(nodes.heads.mean).as_matrix(),
        g.value(nodes.heads.var).as_matrix(),
    );
    (0..f.rows())
        .map(|i| {
            Ok(EncoderOutput {
                feature: f.row(i).to_vec(),
                raw: r.row(i).to_vec(),
                gaussian: GaussianEmbedding::new(m.row(i).to_vec(), v.row(i).to_vec())?,
            })
        })
        .collect()
}

/// Music and emotion towers over one parameter store.
#[derive(Clone, Debug)]
pub struct CrossModalModel {
    pub arch: ModelArch,
    pub store: ParamStore,
    pub music: Tower,
    pub emotion: Tower,
}

impl CrossModalModel {
    /// Fresh parameters: uniform weights in `±1/√fan_in`, zero biases.
    pub fn init(arch: &ModelArch, rng: &mut RandomState) -> Result<Self> {
        let mut store = ParamStore::new();
        let music = Tower::new(&mut store, "music", &arch.music, arch.embed_dim, rng)?;
        let emotion = Tower::new(&mut store, "emotion", &arch.emotion, arch.embed_dim, rng)?;
        Ok(Self {
            arch: arch.clone(),
            store,
            music,
            emotion,
        })
    }

    /// Rebuilds the towers for `arch` and adopts `store`, which must match it.
    pub fn from_parts(arch: &ModelArch, store: ParamStore) -> Result<Self> {
        let mut shell = Self::init(arch, &mut RandomState::new(0))?;
        let names_match = shell.store.len() == store.len()
            && shell
                .store
                .iter()
                .zip(store.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !names_match {
            return Err(Error::Input(
                "parameter layout does not match the architecture".into(),
            ));
        }
        shell.store = store;
        Ok(shell)
    }
}

/// Saved model: architecture, parameters, seed and the frozen projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    pub arch: ModelArch,
    pub params: ParamStore,
    pub cca: Option<CcaSolution>,
}

impl Checkpoint {
    pub fn new(seed: u64, model: &CrossModalModel, cca: Option<CcaSolution>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            seed,
            arch: model.arch.clone(),
            params: model.store.clone(),
            cca,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported format '{}'", ck.format),
            ));
        }
        Ok(ck)
    }

    pub fn model(&self) -> Result<CrossModalModel> {
        CrossModalModel::from_parts(&self.arch, self.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::numerics::ops::softplus_scalar;

    fn small_arch(kind: EncoderKind, input: usize) -> EncoderArch {
        EncoderArch {
            kind,
            input_width: input,
            hidden_width: 4,
            fc_widths: vec![6, 5],
            dropout: 0.0,
            linear_output: false,
        }
    }

    fn random_seq(rng: &mut RandomState, t: usize, k: usize) -> Tensor {
        Tensor::matrix(t, k, (0..t * k).map(|_| rng.normal()).collect()).unwrap()
    }

    fn reversed(seq: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..seq.rows()).rev().map(|i| seq.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn mlp_constant_propagation() {
        let mut store = ParamStore::new();
        let arch = small_arch(EncoderKind::Mlp, 3);
        let enc = Encoder::new(&mut store, "m", &arch, &mut RandomState::new(1)).unwrap();
        let out = enc.encode(&store, &Tensor::zeros(&[4, 3])).unwrap();

        // Zero input and zero biases: the first layer emits ln 2 everywhere.
        let mut v = vec![std::f64::consts::LN_2; 6];
        let w = store.get(enc.fc.layers[1].weight);
        let folded: Vec<f64> = (0..5)
            .map(|o| softplus_scalar(w.row(o).iter().zip(&v).map(|(a, b)| a * b).sum()))
            .collect();
        v = folded;
        for (a, b) in out.data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mlp_pooling_is_order_and_length_invariant() {
        let mut rng = RandomState::new(2);
        let mut store = ParamStore::new();
        let enc =
            Encoder::new(&mut store, "m", &small_arch(EncoderKind::Mlp, 2), &mut rng).unwrap();
        let seq = random_seq(&mut rng, 5, 2);
        let perm = seq.select_rows(&[3, 0, 4, 1, 2]);
        let a = enc.encode(&store, &seq).unwrap();
        let b = enc.encode(&store, &perm).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let constant = Tensor::matrix(3, 2, vec![0.4, -0.2, 0.4, -0.2, 0.4, -0.2]).unwrap();
        let doubled = Tensor::matrix(6, 2, [0.4, -0.2].repeat(6)).unwrap();
        let (c, d) = (
            enc.encode(&store, &constant).unwrap(),
            enc.encode(&store, &doubled).unwrap(),
        );
        for (x, y) in c.data().iter().zip(d.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            "m",
            &small_arch(EncoderKind::Mlp, 3),
            &mut RandomState::new(0),
        )
        .unwrap();
        assert!(matches!(
            enc.encode(&store, &Tensor::zeros(&[2, 4])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            enc.encode(&store, &Tensor::matrix(0, 3, vec![]).unwrap()),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn gru_hand_trace() {
        // Reference values computed independently from the cell equations.
        let arch = EncoderArch {
            kind: EncoderKind::Bigru,
            input_width: 1,
            hidden_width: 1,
            fc_widths: vec![],
            dropout: 0.0,
            linear_output: false,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "e", &arch, &mut RandomState::new(0)).unwrap();
        for p in store.iter_mut() {
            let fill = if p.name.ends_with("bias") { 0.0 } else { 0.5 };
            p.value = Tensor::filled(p.value.shape(), fill);
        }
        let seq = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let out = enc.encode(&store, &seq).unwrap();
        assert!((out.data()[0] - 0.3290781118718679).abs() < 1e-14);
        assert!((out.data()[1] - 0.31369443111985695).abs() < 1e-14);

        let first = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let out = enc.encode(&store, &first).unwrap();
        assert!((out.data()[0] - 0.17446802061504182).abs() < 1e-14);
        assert_eq!(out.data()[0], out.data()[1]);
    }

    #[test]
    fn gru_single_step_uses_only_that_frame() {
        let mut rng = RandomState::new(6);
        let mut arch = small_arch(EncoderKind::Bigru, 2);
        arch.fc_widths.clear();
        let mut store = ParamStore::new();
        let mut enc = Encoder::new(&mut store, "e", &arch, &mut rng).unwrap();
        let frame = random_seq(&mut rng, 1, 2);
        let out = enc.encode(&store, &frame).unwrap();
        // With both directions sharing weights the halves coincide.
        enc.body = match enc.body.clone() {
            Body::Bigru { forward, .. } => Body::Bigru {
                backward: forward.clone(),
                forward,
            },
            b => b,
        };
        let shared = enc.encode(&store, &frame).unwrap();
        assert_eq!(shared.data()[..4], shared.data()[4..]);
        assert_eq!(shared.data()[..4], out.data()[..4]);
    }

    #[test]
    fn batched_padding_matches_single_runs() {
        let mut rng = RandomState::new(8);
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            "e",
            &small_arch(EncoderKind::Bigru, 2),
            &mut rng,
        )
        .unwrap();
        let seqs: Vec<Tensor> = [3, 7, 1, 5]
            .iter()
            .map(|&t| random_seq(&mut rng, t, 2))
            .collect();
        let refs: Vec<&Tensor> = seqs.iter().collect();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let batch = enc.forward(&mut g, &p, &refs, &mut rng, false).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let single = enc.encode(&store, s).unwrap();
            let row = g.value(batch).row(i);
            for (a, b) in row.iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn time_reversal_with_swapped_directions() {
        let mut rng = RandomState::new(12);
        let arch = small_arch(EncoderKind::Bigru, 3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "e", &arch, &mut rng).unwrap();
        let seq = random_seq(&mut rng, 6, 3);
        let original = enc.encode(&store, &seq).unwrap();

        let mut swapped = enc.clone();
        swapped.swap_directions();
        // Halves of the recurrent output trade places, so the first layer's input columns do too.
        let mut store2 = store.clone();
        let w = store2.get_mut(enc.first_layer().unwrap().weight);
        let h = arch.hidden_width;
        for r in 0..w.rows() {
            let row = w.row_mut(r);
            let (a, b) = row.split_at_mut(h);
            a.swap_with_slice(b);
        }
        let rev = swapped.encode(&store2, &reversed(&seq)).unwrap();
        for (a, b) in original.data().iter().zip(rev.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// `sum(c ∘ f̂)` and its gradient with respect to every parameter.
    fn weighted_output_grad(
        enc: &Encoder,
        store: &ParamStore,
        seqs: &[Tensor],
        c: &Tensor,
        flat: &Tensor,
        training: bool,
    ) -> Result<(f64, Tensor)> {
        let mut s = store.clone();
        s.set_flat(flat.data())?;
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let refs: Vec<&Tensor> = seqs.iter().collect();
        let mut rng = RandomState::new(77);
        let out = enc.forward(&mut g, &p, &refs, &mut rng, training)?;
        let cv = g.constant(c.clone());
        let z = g.mul(out, cv)?;
        let total = g.sum(z);
        let grads = g.backward(total)?;
        let mut grad = Vec::new();
        for (v, np) in p.vars().iter().zip(s.iter()) {
            grad.extend_from_slice(grads.get_or_zeros(*v, &np.value).data());
        }
        Ok((g.scalar(total), Tensor::vector(grad)))
    }

    #[test]
    fn encoder_gradients() {
        for (seed, kind) in [
            (0, EncoderKind::Mlp),
            (1, EncoderKind::Bigru),
            (2, EncoderKind::Bigru),
        ] {
            let mut rng = RandomState::new(seed);
            let mut arch = small_arch(kind, 3);
            arch.dropout = 0.3;
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, "x", &arch, &mut rng).unwrap();
            let seqs = vec![random_seq(&mut rng, 4, 3), random_seq(&mut rng, 2, 3)];
            let c = random_seq(&mut rng, 2, 5);
            let flat = Tensor::vector(store.flatten());
            let r = grad_check(
                |x| weighted_output_grad(&enc, &store, &seqs, &c, x, true),
                &flat,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn heads_zero_and_positive() {
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, "h", 3, 2, &mut RandomState::new(0));
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let out = heads.forward(&mut g, &p, f).unwrap();
        assert_eq!(g.value(out.raw).data(), &[0.0, 0.0]);
        assert_eq!(g.value(out.mean).data(), &[0.0, 0.0]);
        for v in g.value(out.var).data() {
            assert_eq!(*v, std::f64::consts::LN_2 + VARIANCE_FLOOR);
        }

        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, "h", 3, 4, &mut RandomState::new(1));
        let mut rng = RandomState::new(2);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(
            Tensor::matrix(
                10_000,
                3,
                (0..30_000).map(|_| 200.0 * rng.normal()).collect(),
            )
            .unwrap(),
        );
        let out = heads.forward(&mut g, &p, f).unwrap();
        assert!(g.value(out.var).data().iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let arch = ModelArch {
            music: small_arch(EncoderKind::Mlp, 8),
            emotion: small_arch(EncoderKind::Bigru, 2),
            embed_dim: 3,
        };
        let a = CrossModalModel::init(&arch, &mut RandomState::new(5)).unwrap();
        let b = CrossModalModel::init(&arch, &mut RandomState::new(5)).unwrap();
        assert_eq!(a.store, b.store);
        assert!(a
            .store
            .iter()
            .filter(|p| p.name.ends_with("bias"))
            .all(|p| p.value.max_abs() == 0.0));

        let fan_in = 100;
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "big", fan_in, 1000, &mut RandomState::new(9));
        let w = store.get(l.weight).data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 1.0 / (3.0 * fan_in as f64);
        assert!(mean.abs() < 3.0 * (expected / n).sqrt(), "{mean}");
        assert!((var / expected - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let arch = ModelArch {
            music: small_arch(EncoderKind::Mlp, 8),
            emotion: small_arch(EncoderKind::Bigru, 2),
            embed_dim: 3,
        };
        let model = CrossModalModel::init(&arch, &mut RandomState::new(5)).unwrap();
        let ck = Checkpoint::new(5, &model, None);
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text, Path::new("ck.json")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), text);
        let bits = |s: &ParamStore| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model().unwrap().store), bits(&model.store));
    }

    #[test]
    fn full_scale_widths() {
        let m = EncoderArch::full_scale_mlp(128);
        assert_eq!(m.output_width(), 1024);
        let r = EncoderArch::full_scale_bigru(2);
        assert_eq!(2 * r.hidden_width, 1024);
        assert!(EncoderArch { dropout: 1.0, ..m }.validate().is_err());
    }
}
