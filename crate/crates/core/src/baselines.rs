//! One-way regression baselines: predict the other modality's time-averaged
//! vector under mean absolute error, then rank candidates by ascending error.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, PairedSample, SplitSpec, MUSIC_WIDTH};
use crate::encoders::{Encoder, EncoderArch, EncoderKind, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Graph, RandomState, Tensor};
use crate::retrieval::{self, Direction, RankedResult};
use crate::trainer::{overall, Adam, MeanStd};

/// Architecture and schedule of one baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub direction: Direction,
    pub kind: EncoderKind,
    /// Includes the output layer, whose width must match the target.
    pub fc_widths: Vec<usize>,
    /// Recurrent state width; ignored by the MLP.
    pub hidden_width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
}

impl BaselineSpec {
    /// Published configuration for a real dataset.
    pub fn full_scale(
        dataset: DatasetKind,
        direction: Direction,
        kind: EncoderKind,
    ) -> Result<Self> {
        use Direction::{EmotionToMusic as E2m, MusicToEmotion as M2e};
        use EncoderKind::{Bigru, Mlp};
        let (epochs, widths, hidden): (usize, Vec<usize>, usize) = match (dataset, kind, direction)
        {
            (DatasetKind::Deam, Mlp, M2e) => (8300, vec![128, 64, 16, 128, 512, 2], 0),
            // The published list ends in 2, which cannot regress a 128-d target.
            (DatasetKind::Deam, Mlp, E2m) => (19200, vec![32, MUSIC_WIDTH], 0),
            (DatasetKind::Deam, Bigru, M2e) => (2000, vec![64, 32, 16, 32, 2], 512),
            (DatasetKind::Deam, Bigru, E2m) => (9200, vec![128, 32, 128, 128, 128], 128),
            (DatasetKind::Pmemo, Mlp, M2e) => (5500, vec![16, 2], 0),
            (DatasetKind::Pmemo, Mlp, E2m) => (9900, vec![32, 128, 128, 128], 0),
            (DatasetKind::Pmemo, Bigru, M2e) => (7500, vec![32, 32, 2], 512),
            (DatasetKind::Pmemo, Bigru, E2m) => (3400, vec![128], 512),
            (DatasetKind::Synthetic, ..) => {
                return Err(Error::Config(
                    "no published baseline for the synthetic dataset".into(),
                ))
            }
        };
        Ok(Self {
            direction,
            kind,
            fc_widths: widths,
            hidden_width: hidden,
            epochs,
            learning_rate: 1e-3,
            dropout: 0.5,
        })
    }

    /// Small configuration matched to the synthetic benchmark's cross-modal model.
    pub fn synthetic(direction: Direction, kind: EncoderKind, epochs: usize) -> Self {
        let out = output_width(direction);
        Self {
            direction,
            kind,
            fc_widths: vec![32, 32, out],
            hidden_width: if kind == EncoderKind::Bigru { 16 } else { 0 },
            epochs,
            learning_rate: 1e-3,
            dropout: 0.1,
        }
    }

    pub fn name(&self) -> String {
        let kind = match self.kind {
            EncoderKind::Mlp => "RegMLP",
            EncoderKind::Bigru => "RegBiGRU",
        };
        format!("{kind}-{}", self.direction.as_str().to_uppercase())
    }

    pub fn input_width(&self) -> usize {
        match self.direction {
            Direction::MusicToEmotion => MUSIC_WIDTH,
            Direction::EmotionToMusic => 2,
        }
    }

    pub fn arch(&self) -> EncoderArch {
        EncoderArch {
            kind: self.kind,
            input_width: self.input_width(),
            hidden_width: if self.kind == EncoderKind::Bigru {
                self.hidden_width
            } else {
                0
            },
            fc_widths: self.fc_widths.clone(),
            dropout: self.dropout,
            linear_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = output_width(self.direction);
        if self.fc_widths.last() != Some(&want) {
            return Err(Error::Config(format!(
                "{} must end in a layer of width {want}, got {:?}",
                self.name(),
                self.fc_widths
            )));
        }
        if self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "epochs and learning rate must be positive".into(),
            ));
        }
        self.arch().validate()
    }
}

fn output_width(direction: Direction) -> usize {
    match direction {
        Direction::MusicToEmotion => 2,
        Direction::EmotionToMusic => MUSIC_WIDTH,
    }
}

/// Regression input and the time-averaged target of the other modality.
fn io_pair(direction: Direction, s: &PairedSample) -> (&Tensor, &Tensor) {
    match direction {
        Direction::MusicToEmotion => (&s.music, &s.emotion),
        Direction::EmotionToMusic => (&s.emotion, &s.music),
    }
}

fn targets(direction: Direction, samples: &[PairedSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| overall(io_pair(direction, s).1))
        .collect()
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub spec: BaselineSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// Training MAE per epoch.
    pub loss_trace: Vec<f64>,
}

impl BaselineModel {
    /// Inference-mode predictions, one per sample.
    pub fn predict(&self, samples: &[PairedSample]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<&Tensor> = samples
            .iter()
            .map(|s| io_pair(self.spec.direction, s).0)
            .collect();
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let out = self
            .encoder
            .forward(&mut g, &p, &inputs, &mut RandomState::new(0), false)?;
        let m = g.value(out).as_matrix();
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }
}

/// Full-batch Adam on the mean absolute error.
pub fn baseline_train(
    spec: &BaselineSpec,
    samples: &[PairedSample],
    seed: u64,
) -> Result<BaselineModel> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut store = ParamStore::new();
    let encoder = Encoder::new(
        &mut store,
        "baseline",
        &spec.arch(),
        &mut RandomState::with_stream(seed, 1),
    )?;
    let mut dropout_rng = RandomState::with_stream(seed, 2);
    let inputs: Vec<&Tensor> = samples
        .iter()
        .map(|s| io_pair(spec.direction, s).0)
        .collect();
    let target = Tensor::from_rows(&targets(spec.direction, samples)?)?;
    let mut adam = Adam::new(spec.learning_rate, &store);
    let mut trace = Vec::with_capacity(spec.epochs);
    for epoch in 1..=spec.epochs {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let pred = encoder.forward(&mut g, &p, &inputs, &mut dropout_rng, true)?;
        let t = g.constant(target.clone());
        let loss = g.mean_abs_error(pred, t)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { epoch, loss: value });
        }
        let grads = g.backward(loss)?;
        let flat: Vec<Tensor> = p
            .vars()
            .iter()
            .zip(store.iter())
            .map(|(v, np)| grads.get_or_zeros(*v, &np.value))
            .collect();
        adam.step(&mut store, &flat)?;
        trace.push(value);
    }
    Ok(BaselineModel {
        spec: spec.clone(),
        store,
        encoder,
        loss_trace: trace,
    })
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Ranks every ground truth for each prediction by ascending mean absolute error.
pub fn baseline_rank(
    predictions: &[(String, Vec<f64>)],
    truths: &[(String, Vec<f64>)],
) -> Result<Vec<RankedResult>> {
    if predictions.len() != truths.len()
        || predictions
            .iter()
            .zip(truths)
            .any(|((a, _), (b, _))| a != b)
    {
        return Err(Error::Pairing(
            "predictions and ground truths must list the same ids in the same order".into(),
        ));
    }
    if let Some((id, _)) = predictions
        .iter()
        .zip(truths)
        .find(|((_, p), (_, t))| p.len() != t.len())
        .map(|(p, _)| p)
    {
        return Err(Error::dim(
            "baseline_rank",
            format!("prediction '{id}' differs in width from its target"),
        ));
    }
    let ids: Vec<String> = truths.iter().map(|(id, _)| id.clone()).collect();
    predictions
        .iter()
        .map(|(qid, pred)| {
            let sims: Vec<f64> = truths.iter().map(|(_, t)| -mean_abs(pred, t)).collect();
            retrieval::rank_similarities(qid, &ids, &sims, qid)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BaselineEval {
    pub mrr: f64,
    pub ar: f64,
    pub results: Vec<RankedResult>,
}

pub fn baseline_evaluate(model: &BaselineModel, samples: &[PairedSample]) -> Result<BaselineEval> {
    let preds = model.predict(samples)?;
    let truths = targets(model.spec.direction, samples)?;
    let ids = samples.iter().map(|s| s.id.clone());
    let results = baseline_rank(
        &ids.clone().zip(preds).collect::<Vec<_>>(),
        &ids.zip(truths).collect::<Vec<_>>(),
    )?;
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    Ok(BaselineEval {
        mrr: retrieval::mrr(&ranks)?,
        ar: retrieval::ar(&ranks)?,
        results,
    })
}

/// Per-session metrics of a baseline across repeated splits.
#[derive(Clone, Debug)]
pub struct BaselineReport {
    pub spec: BaselineSpec,
    pub sessions: Vec<(u64, BaselineEval)>,
}

impl BaselineReport {
    pub fn mrr(&self) -> MeanStd {
        MeanStd::of(&self.sessions.iter().map(|(_, e)| e.mrr).collect::<Vec<_>>())
    }

    pub fn ar(&self) -> MeanStd {
        MeanStd::of(&self.sessions.iter().map(|(_, e)| e.ar).collect::<Vec<_>>())
    }
}

/// Same seeds and splits as the cross-modal sessions: session `i` uses `base_seed + i`.
pub fn repeat_baseline(
    spec: &BaselineSpec,
    samples: &[PairedSample],
    train_fraction: f64,
    base_seed: u64,
    sessions: usize,
) -> Result<BaselineReport> {
    let runs = (0..sessions)
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let wrap = |e: Error| Error::Session {
                session: i,
                source: Box::new(e),
            };
            let (train, eval) = crate::data::split(
                samples,
                &SplitSpec {
                    train_fraction,
                    seed,
                },
            )
            .map_err(wrap)?;
            let model = baseline_train(spec, &train, seed).map_err(wrap)?;
            Ok((seed, baseline_evaluate(&model, &eval).map_err(wrap)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineReport {
        spec: spec.clone(),
        sessions: runs,
    })
}
