//! Optimization loop, evaluation, repeated sessions and the λ sweep.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, PairedSample, SplitSpec, SynthSpec, ValueRange};
use crate::encoders::{
    collect_outputs, CrossModalModel, EncoderArch, EncoderKind, EncoderOutput, ModelArch,
    ParamStore,
};
use crate::error::{Error, Result};
use crate::losses::{self, cca_loss, CcaSolution, GaussianBatch, LossConfig};
use crate::numerics::{
    linalg::DEFAULT_EIG_FLOOR, mean_over_time, Graph, MarginConvention, RandomState, Tensor,
};
use crate::retrieval::{self, Direction, KlDirection, QueryOutput, RankedResult};

pub const CONFIG_HEADER: &str = "# mer-config v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Composite,
    CcaOnly,
    KlOnly,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(Self::Composite),
            "cca-only" => Ok(Self::CcaOnly),
            "kl-only" => Ok(Self::KlOnly),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}' (expected composite, cca-only or kl-only)"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Composite => "composite",
            Self::CcaOnly => "cca-only",
            Self::KlOnly => "kl-only",
        })
    }
}

/// Every knob of a training/evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub margin: MarginConvention,
    pub ridge: f64,
    /// Canonical directions; 0 means all.
    pub cca_k: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub kl_direction: KlDirection,
    pub encoder_music: EncoderKind,
    pub encoder_emotion: EncoderKind,
    pub music_layers: Vec<usize>,
    pub emotion_layers: Vec<usize>,
    pub music_hidden: usize,
    pub emotion_hidden: usize,
    pub dropout: f64,
    pub train_fraction: f64,
    pub sessions: usize,
    pub top_fraction: f64,
    /// Parallel sessions; 1 is the reproducible single-worker mode.
    pub workers: usize,
    /// Dataset manifest; empty means generate the synthetic benchmark.
    pub dataset: String,
    pub synth_n: usize,
    pub synth_latent_dim: usize,
    pub synth_noise: f64,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub synth_nuisance_dim: usize,
    pub synth_nuisance_scale: f64,
    pub synth_range: ValueRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            lambda: 0.5,
            alpha: 1.0,
            margin: MarginConvention::Loose,
            ridge: losses::DEFAULT_RIDGE,
            cca_k: 0,
            embed_dim: 16,
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 0,
            seed: 0,
            loss_mode: LossMode::Composite,
            kl_direction: KlDirection::QueryToCandidate,
            encoder_music: EncoderKind::Mlp,
            encoder_emotion: EncoderKind::Bigru,
            music_layers: vec![32, 32],
            emotion_layers: vec![32, 32],
            music_hidden: 16,
            emotion_hidden: 16,
            dropout: 0.1,
            train_fraction: 0.8,
            sessions: 10,
            top_fraction: 0.05,
            workers: 1,
            dataset: String::new(),
            synth_n: synth.n,
            synth_latent_dim: synth.latent_dim,
            synth_noise: synth.noise_scale,
            synth_min_len: synth.seq_len.0,
            synth_max_len: synth.seq_len.1,
            synth_nuisance_dim: synth.nuisance_dim,
            synth_nuisance_scale: synth.nuisance_scale,
            synth_range: synth.range,
        }
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

fn list_text(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Published settings for a real dataset: tuned `λ`/`α`, learning rate, epoch
    /// count, embedding width and the best-performing encoder pair.
    pub fn full_scale(dataset: data::DatasetKind) -> Result<Self> {
        let (lambda, alpha, epochs, music) = match dataset {
            data::DatasetKind::Deam => (0.8, 1.0, 5001, EncoderKind::Mlp),
            data::DatasetKind::Pmemo => (0.6, 0.4, 10001, EncoderKind::Bigru),
            data::DatasetKind::Synthetic => {
                return Err(Error::Config(
                    "no published settings for the synthetic dataset".into(),
                ))
            }
        };
        let mlp = EncoderArch::full_scale_mlp(data::MUSIC_WIDTH);
        let gru = EncoderArch::full_scale_bigru(2);
        let music_layers = if music == EncoderKind::Mlp {
            &mlp
        } else {
            &gru
        }
        .fc_widths
        .clone();
        Ok(Self {
            lambda,
            alpha,
            epochs,
            learning_rate: 1e-5,
            embed_dim: 1024,
            encoder_music: music,
            encoder_emotion: EncoderKind::Bigru,
            music_layers,
            emotion_layers: gru.fc_widths.clone(),
            music_hidden: gru.hidden_width,
            emotion_hidden: gru.hidden_width,
            dropout: gru.dropout,
            ..Self::default()
        })
    }

    /// `λ` actually used by training and retrieval after applying the loss mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.loss_mode {
            LossMode::Composite => self.lambda,
            LossMode::CcaOnly => 1.0,
            LossMode::KlOnly => 0.0,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.effective_lambda(),
            alpha: self.alpha,
            ridge: self.ridge,
            k: (self.cca_k > 0).then_some(self.cca_k),
            margin: self.margin,
            eig_floor: DEFAULT_EIG_FLOOR,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n: self.synth_n,
            latent_dim: self.synth_latent_dim,
            noise_scale: self.synth_noise,
            seq_len: (self.synth_min_len, self.synth_max_len),
            nuisance_dim: self.synth_nuisance_dim,
            nuisance_scale: self.synth_nuisance_scale,
            range: self.synth_range,
            music_width: data::MUSIC_WIDTH,
        }
    }

    pub fn encoder_arch(
        &self,
        kind: EncoderKind,
        input: usize,
        layers: &[usize],
        hidden: usize,
    ) -> EncoderArch {
        EncoderArch {
            kind,
            input_width: input,
            hidden_width: if kind == EncoderKind::Bigru {
                hidden
            } else {
                0
            },
            fc_widths: layers.to_vec(),
            dropout: self.dropout,
            linear_output: false,
        }
    }

    pub fn model_arch(&self, music_width: usize) -> ModelArch {
        ModelArch {
            music: self.encoder_arch(
                self.encoder_music,
                music_width,
                &self.music_layers,
                self.music_hidden,
            ),
            emotion: self.encoder_arch(
                self.encoder_emotion,
                2,
                &self.emotion_layers,
                self.emotion_hidden,
            ),
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size != 0 && self.batch_size < 8 {
            return bad(format!(
                "batch_size must be 0 (full batch) or >= 8, got {}",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.sessions == 0 || self.workers == 0 {
            return bad("sessions and workers must be >= 1".into());
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return bad(format!(
                "top_fraction must be in (0, 1], got {}",
                self.top_fraction
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2 (Pearson similarity needs two components)".into());
        }
        self.loss_config()
            .validate(self.embed_dim)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.model_arch(data::MUSIC_WIDTH).music.validate()?;
        self.model_arch(data::MUSIC_WIDTH).emotion.validate()?;
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| Error::Config(format!("{key}: cannot parse '{v}': {e}")))
        }
        let list = |v: &str| parse_list(v).map_err(|e| Error::Config(format!("{key}: {e}")));
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "margin" => {
                self.margin = match value {
                    "loose" => MarginConvention::Loose,
                    "strict" => MarginConvention::Strict,
                    other => {
                        return Err(Error::Config(format!(
                            "margin: unknown convention '{other}'"
                        )))
                    }
                }
            }
            "ridge" => self.ridge = num(key, value)?,
            "cca_k" => self.cca_k = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "kl_direction" => self.kl_direction = value.parse()?,
            "encoder_music" => self.encoder_music = value.parse()?,
            "encoder_emotion" => self.encoder_emotion = value.parse()?,
            "music_layers" => self.music_layers = list(value)?,
            "emotion_layers" => self.emotion_layers = list(value)?,
            "music_hidden" => self.music_hidden = num(key, value)?,
            "emotion_hidden" => self.emotion_hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "sessions" => self.sessions = num(key, value)?,
            "top_fraction" => self.top_fraction = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "synth_n" => self.synth_n = num(key, value)?,
            "synth_latent_dim" => self.synth_latent_dim = num(key, value)?,
            "synth_noise" => self.synth_noise = num(key, value)?,
            "synth_min_len" => self.synth_min_len = num(key, value)?,
            "synth_max_len" => self.synth_max_len = num(key, value)?,
            "synth_nuisance_dim" => self.synth_nuisance_dim = num(key, value)?,
            "synth_nuisance_scale" => self.synth_nuisance_scale = num(key, value)?,
            "synth_range" => self.synth_range = value.parse()?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses the `key = value` config format. Unlisted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CONFIG_HEADER) {
            return Err(Error::Config(format!(
                "first line must be '{CONFIG_HEADER}'"
            )));
        }
        let mut cfg = Self::default();
        for (i, raw) in lines.enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 2)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 2)))?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut lines = vec![CONFIG_HEADER.to_string()];
        let mut put = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        put("lambda", self.lambda.to_string());
        put("alpha", self.alpha.to_string());
        put(
            "margin",
            match self.margin {
                MarginConvention::Loose => "loose",
                MarginConvention::Strict => "strict",
            }
            .into(),
        );
        put("ridge", self.ridge.to_string());
        put("cca_k", self.cca_k.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("loss_mode", self.loss_mode.to_string());
        put("kl_direction", self.kl_direction.to_string());
        put("encoder_music", self.encoder_music.to_string());
        put("encoder_emotion", self.encoder_emotion.to_string());
        put("music_layers", list_text(&self.music_layers));
        put("emotion_layers", list_text(&self.emotion_layers));
        put("music_hidden", self.music_hidden.to_string());
        put("emotion_hidden", self.emotion_hidden.to_string());
        put("dropout", self.dropout.to_string());
        put("train_fraction", self.train_fraction.to_string());
        put("sessions", self.sessions.to_string());
        put("top_fraction", self.top_fraction.to_string());
        put("workers", self.workers.to_string());
        put("dataset", self.dataset.clone());
        put("synth_n", self.synth_n.to_string());
        put("synth_latent_dim", self.synth_latent_dim.to_string());
        put("synth_noise", self.synth_noise.to_string());
        put("synth_min_len", self.synth_min_len.to_string());
        put("synth_max_len", self.synth_max_len.to_string());
        put("synth_nuisance_dim", self.synth_nuisance_dim.to_string());
        put(
            "synth_nuisance_scale",
            self.synth_nuisance_scale.to_string(),
        );
        put("synth_range", self.synth_range.to_string());
        lines.join("\n") + "\n"
    }
}

/// Adaptive-moment optimizer with the canonical constants.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim(
                "adam",
                format!("{} grads for {} params", grads.len(), store.len()),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Trained model, frozen projections and per-epoch losses.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CrossModalModel,
    pub cca: CcaSolution,
    pub loss_trace: Vec<f64>,
}

fn sequences(samples: &[PairedSample]) -> (Vec<&Tensor>, Vec<&Tensor>) {
    (
        samples.iter().map(|s| &s.music).collect(),
        samples.iter().map(|s| &s.emotion).collect(),
    )
}

/// One forward/backward pass; returns the loss and the gradient of every parameter.
fn loss_and_grads(
    model: &CrossModalModel,
    batch: &[&PairedSample],
    loss_cfg: &LossConfig,
    rng: &mut RandomState,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let music: Vec<&Tensor> = batch.iter().map(|s| &s.music).collect();
    let emotion: Vec<&Tensor> = batch.iter().map(|s| &s.emotion).collect();
    let m = model.music.forward(&mut g, &p, &music, rng, true)?;
    let e = model.emotion.forward(&mut g, &p, &emotion, rng, true)?;
    let gauss = GaussianBatch {
        music_mean: m.heads.mean,
        music_var: m.heads.var,
        emotion_mean: e.heads.mean,
        emotion_var: e.heads.var,
    };
    let nodes = losses::composite_graph(&mut g, m.heads.raw, e.heads.raw, &gauss, loss_cfg)?;
    let loss = g.scalar(nodes.total);
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let grads = g.backward(nodes.total)?;
    let out = p
        .vars()
        .iter()
        .zip(model.store.iter())
        .map(|(v, np)| grads.get_or_zeros(*v, &np.value))
        .collect();
    Ok((loss, out))
}

/// Inference-mode outputs of both towers.
pub fn infer(
    model: &CrossModalModel,
    samples: &[PairedSample],
) -> Result<(Vec<EncoderOutput>, Vec<EncoderOutput>)> {
    let (music, emotion) = sequences(samples);
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let mut rng = RandomState::new(0);
    let m = model.music.forward(&mut g, &p, &music, &mut rng, false)?;
    let e = model
        .emotion
        .forward(&mut g, &p, &emotion, &mut rng, false)?;
    Ok((collect_outputs(&g, &m)?, collect_outputs(&g, &e)?))
}

/// Canonical projections fitted on the inference-mode embeddings of `samples`.
pub fn fit_projections(
    model: &CrossModalModel,
    samples: &[PairedSample],
    cfg: &TrainConfig,
) -> Result<CcaSolution> {
    let (m, e) = infer(model, samples)?;
    let stack = |o: &[EncoderOutput]| {
        let rows: Vec<Vec<f64>> = o.iter().map(|x| x.raw.clone()).collect();
        Tensor::from_rows(&rows)
    };
    let (_, solution) = cca_loss(&stack(&m)?, &stack(&e)?, &cfg.loss_config())?;
    Ok(solution)
}

/// Trains both encoders and heads from fresh parameters drawn from `seed`.
pub fn train(cfg: &TrainConfig, samples: &[PairedSample], seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let arch = cfg.model_arch(samples[0].music.cols());
    let mut model = CrossModalModel::init(&arch, &mut RandomState::with_stream(seed, 1))?;
    let mut dropout_rng = RandomState::with_stream(seed, 2);
    let mut batch_rng = RandomState::with_stream(seed, 3);
    let mut adam = Adam::new(cfg.learning_rate, &model.store);
    let loss_cfg = cfg.loss_config();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let all: Vec<&PairedSample> = samples.iter().collect();

    for epoch in 1..=cfg.epochs {
        let batches: Vec<Vec<&PairedSample>> = if cfg.batch_size == 0 || cfg.batch_size >= all.len()
        {
            vec![all.clone()]
        } else {
            let mut order = all.clone();
            batch_rng.shuffle(&mut order);
            let mut chunks: Vec<Vec<&PairedSample>> =
                order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
            if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 8) {
                let tail = chunks.pop().unwrap();
                chunks.last_mut().unwrap().extend(tail);
            }
            chunks
        };
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grads) = loss_and_grads(&model, batch, &loss_cfg, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            adam.step(&mut model.store, &grads)?;
            total += loss;
        }
        trace.push(total / batches.len() as f64);
    }
    let cca = fit_projections(&model, samples, cfg)?;
    Ok(TrainOutcome {
        model,
        cca,
        loss_trace: trace,
    })
}

/// Retrieval results for one direction.
#[derive(Clone, Debug)]
pub struct DirectionEval {
    pub direction: Direction,
    pub mrr: f64,
    pub ar: f64,
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub results: Vec<RankedResult>,
    pub cosines: Vec<f64>,
}

impl DirectionEval {
    pub fn ranks(&self) -> Vec<usize> {
        self.results.iter().map(|r| r.rank).collect()
    }
}

/// Overall vector of a sequence: its mean over time.
pub fn overall(seq: &Tensor) -> Result<Vec<f64>> {
    Ok(mean_over_time(seq)?.into_data())
}

/// Ranks with shared candidate sets and computes the metrics.
pub fn score_direction(
    direction: Direction,
    queries: &[QueryOutput],
    candidates: &[QueryOutput],
    samples: &[PairedSample],
    lambda: f64,
    kl_dir: KlDirection,
    fraction: f64,
) -> Result<DirectionEval> {
    let query_overall: Vec<(String, Vec<f64>)> = samples
        .iter()
        .map(|s| {
            let seq = match direction {
                Direction::MusicToEmotion => &s.music,
                Direction::EmotionToMusic => &s.emotion,
            };
            Ok((s.id.clone(), overall(seq)?))
        })
        .collect::<Result<_>>()?;
    let mut results = Vec::with_capacity(queries.len());
    let mut cosines = Vec::with_capacity(queries.len());
    for (q, (_, qv)) in queries.iter().zip(&query_overall) {
        let r = match retrieval::rank_candidates(q, candidates, &q.id, lambda, kl_dir) {
            Ok(r) => r,
            Err(Error::UndefinedCorrelation(msg)) => {
                eprintln!(
                    "warning: skipping {} query {}: {msg}",
                    direction.as_str(),
                    q.id
                );
                continue;
            }
            Err(e) => return Err(e),
        };
        let ids: Vec<String> = r.ranked.iter().map(|(id, _)| id.clone()).collect();
        cosines.push(retrieval::top_fraction_cosine(
            qv,
            &query_overall,
            &ids,
            fraction,
        )?);
        results.push(r);
    }
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    let (cosine_mean, cosine_std) = retrieval::mean_std(&cosines);
    Ok(DirectionEval {
        direction,
        mrr: retrieval::mrr(&ranks)?,
        ar: retrieval::ar(&ranks)?,
        cosine_mean,
        cosine_std,
        results,
        cosines,
    })
}

/// Every evaluation sample queries all samples of the other modality, both ways.
pub fn evaluate(
    model: &CrossModalModel,
    cca: &CcaSolution,
    samples: &[PairedSample],
    cfg: &TrainConfig,
) -> Result<[DirectionEval; 2]> {
    if samples.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let (m, e) = infer(model, samples)?;
    let to_queries = |outs: Vec<EncoderOutput>, music: bool| -> Result<Vec<QueryOutput>> {
        outs.into_iter()
            .zip(samples)
            .map(|(o, s)| {
                let embedding = if music {
                    cca.project_music(&o.raw)?
                } else {
                    cca.project_emotion(&o.raw)?
                };
                Ok(QueryOutput {
                    id: s.id.clone(),
                    embedding,
                    gaussian: o.gaussian,
                })
            })
            .collect()
    };
    let music = to_queries(m, true)?;
    let emotion = to_queries(e, false)?;
    let lambda = cfg.effective_lambda();
    Ok([
        score_direction(
            Direction::MusicToEmotion,
            &music,
            &emotion,
            samples,
            lambda,
            cfg.kl_direction,
            cfg.top_fraction,
        )?,
        score_direction(
            Direction::EmotionToMusic,
            &emotion,
            &music,
            samples,
            lambda,
            cfg.kl_direction,
            cfg.top_fraction,
        )?,
    ])
}

/// Loads the configured dataset, or generates the synthetic benchmark from the base seed.
pub fn load_samples(cfg: &TrainConfig) -> Result<Vec<PairedSample>> {
    if cfg.dataset.is_empty() {
        data::synth_generate(&cfg.synth_spec(), cfg.seed)
    } else {
        let manifest = data::DatasetManifest::read(Path::new(&cfg.dataset))?;
        let samples = data::load_dataset(&manifest)?;
        if manifest.prepared {
            Ok(samples)
        } else {
            data::preprocess(samples, manifest.dataset)
        }
    }
}

/// One training session.
#[derive(Clone, Debug)]
pub struct SessionResult {
    pub session: usize,
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub eval: [DirectionEval; 2],
}

impl SessionResult {
    pub fn mrr(&self, d: Direction) -> f64 {
        self.eval[d as usize].mrr
    }

    pub fn ar(&self, d: Direction) -> f64 {
        self.eval[d as usize].ar
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = retrieval::mean_std(values);
        Self { mean, std }
    }
}

/// Sessions plus their aggregate.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    pub sessions: Vec<SessionResult>,
    /// Not written to report files, which must be reproducible.
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn metric(&self, d: Direction, f: impl Fn(&DirectionEval) -> f64) -> MeanStd {
        let v: Vec<f64> = self
            .sessions
            .iter()
            .map(|s| f(&s.eval[d as usize]))
            .collect();
        MeanStd::of(&v)
    }

    pub fn mrr(&self, d: Direction) -> MeanStd {
        self.metric(d, |e| e.mrr)
    }

    pub fn ar(&self, d: Direction) -> MeanStd {
        self.metric(d, |e| e.ar)
    }
}

/// Session `i` reshuffles the split and reinitializes with seed `base + i`.
pub fn run_session(
    cfg: &TrainConfig,
    samples: &[PairedSample],
    session: usize,
) -> Result<SessionResult> {
    let seed = cfg.seed.wrapping_add(session as u64);
    let wrap = |e: Error| Error::Session {
        session,
        source: Box::new(e),
    };
    let spec = SplitSpec {
        train_fraction: cfg.train_fraction,
        seed,
    };
    let (train_set, eval_set) = data::split(samples, &spec).map_err(wrap)?;
    let outcome = train(cfg, &train_set, seed).map_err(wrap)?;
    let eval = evaluate(&outcome.model, &outcome.cca, &eval_set, cfg).map_err(wrap)?;
    Ok(SessionResult {
        session,
        seed,
        outcome,
        eval,
    })
}

/// Runs `sessions` independent sessions, in parallel when `workers > 1`.
pub fn repeat_experiment(
    cfg: &TrainConfig,
    samples: &[PairedSample],
    sessions: usize,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if sessions == 0 {
        return Err(Error::Config("sessions must be >= 1".into()));
    }
    let start = Instant::now();
    let run = |i: usize| run_session(cfg, samples, i);
    let results: Vec<Result<SessionResult>> = if cfg.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..sessions).into_par_iter().map(run).collect())
    } else {
        (0..sessions).map(run).collect()
    };
    let sessions = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        config: cfg.clone(),
        sessions,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// `0.0, 0.1, …, 1.0`.
pub fn default_lambdas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// One experiment per `λ`, everything else fixed.
pub fn lambda_sweep(
    cfg: &TrainConfig,
    samples: &[PairedSample],
    lambdas: &[f64],
) -> Result<Vec<(f64, ExperimentReport)>> {
    lambdas
        .iter()
        .map(|&l| {
            let c = TrainConfig {
                lambda: l,
                loss_mode: LossMode::Composite,
                ..cfg.clone()
            };
            Ok((l, repeat_experiment(&c, samples, cfg.sessions)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            embed_dim: 3,
            epochs: 5,
            music_layers: vec![6],
            emotion_layers: vec![6],
            emotion_hidden: 3,
            synth_n: 12,
            synth_min_len: 3,
            synth_max_len: 6,
            sessions: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let cfg = TrainConfig {
            lambda: 0.3,
            music_layers: vec![],
            dataset: "data/manifest.txt".into(),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let unknown = format!("{CONFIG_HEADER}\nlearning_rat = 0.1\n");
        assert!(
            matches!(TrainConfig::parse(&unknown), Err(Error::Config(m)) if m.contains("learning_rat"))
        );
        assert!(TrainConfig::parse("lambda = 0.5\n").is_err());
        let mut c = TrainConfig::default();
        assert!(c.set("loss_mode", "both").is_err());
        c.batch_size = 4;
        assert!(c.validate().is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn full_scale_presets() {
        let deam = TrainConfig::full_scale(data::DatasetKind::Deam).unwrap();
        assert_eq!((deam.lambda, deam.alpha, deam.epochs), (0.8, 1.0, 5001));
        assert_eq!(deam.encoder_music, EncoderKind::Mlp);
        let pmemo = TrainConfig::full_scale(data::DatasetKind::Pmemo).unwrap();
        assert_eq!((pmemo.lambda, pmemo.alpha, pmemo.epochs), (0.6, 0.4, 10001));
        assert_eq!((pmemo.learning_rate, pmemo.embed_dim), (1e-5, 1024));
        pmemo.validate().unwrap();
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let before = store.clone();
        let mut adam = Adam::new(0.1, &store);
        adam.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(store, before);
        let mut fresh = Adam::new(0.1, &store);
        fresh
            .step(&mut store, &[Tensor::vector(vec![1.0, -1.0])])
            .unwrap();
        // First step moves each coordinate by about the learning rate against the gradient.
        assert!((store.flatten()[0] - 0.9).abs() < 1e-6);
        assert!((store.flatten()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn cca_only_matches_lambda_one() {
        let cfg = tiny_config();
        let samples = load_samples(&cfg).unwrap();
        let a = train(
            &TrainConfig {
                loss_mode: LossMode::CcaOnly,
                ..cfg.clone()
            },
            &samples,
            3,
        )
        .unwrap();
        let b = train(
            &TrainConfig {
                lambda: 1.0,
                ..cfg.clone()
            },
            &samples,
            3,
        )
        .unwrap();
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_trace), bits(&b.loss_trace));
        assert_eq!(a.model.store, b.model.store);
    }

    #[test]
    fn evaluation_of_single_sample_is_perfect() {
        let cfg = tiny_config();
        let samples = load_samples(&cfg).unwrap();
        let out = train(&cfg, &samples, 1).unwrap();
        let before = out.model.store.clone();
        let eval = evaluate(&out.model, &out.cca, &samples[..1], &cfg).unwrap();
        for d in &eval {
            assert_eq!((d.mrr, d.ar), (1.0, 1.0));
        }
        assert_eq!(out.model.store, before);
        assert!(evaluate(&out.model, &out.cca, &[], &cfg).is_err());
    }

    #[test]
    fn sessions_are_reproducible() {
        let cfg = tiny_config();
        let samples = load_samples(&cfg).unwrap();
        let a = repeat_experiment(&cfg, &samples, 2).unwrap();
        let b = repeat_experiment(&cfg, &samples, 2).unwrap();
        for (x, y) in a.sessions.iter().zip(&b.sessions) {
            assert_eq!(x.outcome.loss_trace, y.outcome.loss_trace);
            assert_eq!(x.seed, y.seed);
        }
        assert_eq!(a.sessions[1].seed, cfg.seed + 1);
        let one = repeat_experiment(&cfg, &samples, 1).unwrap();
        assert_eq!(one.mrr(Direction::MusicToEmotion).std, 0.0);
    }

    #[test]
    fn minibatch_mode_runs() {
        let cfg = TrainConfig {
            batch_size: 8,
            ..tiny_config()
        };
        let samples = load_samples(&cfg).unwrap();
        let out = train(&cfg, &samples, 0).unwrap();
        assert_eq!(out.loss_trace.len(), cfg.epochs);
        assert!(out.loss_trace.iter().all(|v| v.is_finite()));
    }
}
