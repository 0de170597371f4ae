//! `mer` command line: dataset preparation, synthetic data, training,
//! evaluation, repeated experiments, λ sweeps and baselines.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure or divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::baselines::{repeat_baseline, BaselineSpec};
use crate::data::{self, DatasetKind, DatasetManifest};
use crate::encoders::{Checkpoint, EncoderKind};
use crate::error::{Error, ErrorClass, Result};
use crate::report::{self, RunManifest};
use crate::retrieval::Direction;
use crate::trainer::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mer", version, about = "Cross-modal music/emotion retrieval")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Window/filter a raw dataset manifest and write the prepared dataset.
    Prepare(Common),
    /// Generate the synthetic paired dataset.
    Synth(Common),
    /// Train one session and write a checkpoint plus its loss trace.
    Train(Common),
    /// Evaluate the checkpoint in the output directory on its held-out split.
    Evaluate(Common),
    /// Run one experiment per λ in 0.0, 0.1, …, 1.0.
    Sweep(Common),
    /// Train and evaluate the four one-way regression baselines.
    Baseline(Common),
    /// Run the repeated-session experiment and write full reports.
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (`# mer-config v1` header, key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repeated sessions.
    #[arg(long)]
    sessions: Option<usize>,
    /// Weight of the CCA term and of the Pearson similarity.
    #[arg(long)]
    lambda: Option<f64>,
    /// Ranking margin.
    #[arg(long)]
    alpha: Option<f64>,
    /// composite, cca-only or kl-only.
    #[arg(long)]
    loss_mode: Option<String>,
    /// mlp or bigru.
    #[arg(long)]
    encoder_music: Option<String>,
    /// mlp or bigru.
    #[arg(long)]
    encoder_emotion: Option<String>,
    /// Dataset manifest path (raw for `prepare`, prepared otherwise).
    #[arg(long)]
    dataset: Option<String>,
    /// Fraction of top-ranked candidates in the cosine analysis.
    #[arg(long)]
    fraction: Option<f64>,
    /// Synthetic sample count.
    #[arg(long)]
    n: Option<usize>,
    /// Progress and timing on stderr.
    #[arg(short, long)]
    verbose: bool,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::read(p)?,
            None => TrainConfig::default(),
        };
        let overrides: [(&str, Option<String>); 11] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("sessions", self.sessions.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("loss_mode", self.loss_mode.clone()),
            ("encoder_music", self.encoder_music.clone()),
            ("encoder_emotion", self.encoder_emotion.clone()),
            ("dataset", self.dataset.clone()),
            ("top_fraction", self.fraction.map(|v| v.to_string())),
            ("synth_n", self.n.map(|v| v.to_string())),
            ("workers", None),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)
                    .map_err(|e| Error::Config(format!("--{}: {e}", key.replace('_', "-"))))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn progress(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }
}

fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

/// Parses `args` (including the program name), runs the verb and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.verb) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.class())
        }
    }
}

fn execute(verb: Verb) -> Result<()> {
    let start = Instant::now();
    let (name, common) = match &verb {
        Verb::Prepare(c) => ("prepare", c),
        Verb::Synth(c) => ("synth", c),
        Verb::Train(c) => ("train", c),
        Verb::Evaluate(c) => ("evaluate", c),
        Verb::Sweep(c) => ("sweep", c),
        Verb::Baseline(c) => ("baseline", c),
        Verb::Report(c) => ("report", c),
    };
    let cfg = common.config()?;
    let out = common.out.as_path();
    match verb {
        Verb::Prepare(_) => prepare(&cfg, out)?,
        Verb::Synth(_) => synth(&cfg, out)?,
        Verb::Train(_) => train(&cfg, out)?,
        Verb::Evaluate(_) => evaluate(&cfg, out)?,
        Verb::Sweep(_) => sweep(&cfg, out)?,
        Verb::Baseline(_) => baseline(&cfg, out)?,
        Verb::Report(_) => experiment(&cfg, out)?,
    }
    common.progress(&format!(
        "{name}: done in {:.1}s",
        start.elapsed().as_secs_f64()
    ));
    Ok(())
}

fn dataset_dir(
    cfg: &TrainConfig,
    verb: &str,
    out: &Path,
    samples: &[data::PairedSample],
    kind: DatasetKind,
    range: data::ValueRange,
) -> Result<()> {
    let manifest = data::write_dataset(out, samples, kind, range)?;
    let text = manifest.to_text();
    report::write_outputs(
        out,
        &[("manifest.txt", text.into_bytes())],
        RunManifest::new(verb, cfg.seed, &cfg.to_text()),
    )
}

fn prepare(cfg: &TrainConfig, out: &Path) -> Result<()> {
    if cfg.dataset.is_empty() {
        return Err(Error::Config(
            "prepare needs --dataset <raw manifest>".into(),
        ));
    }
    let raw = DatasetManifest::read(Path::new(&cfg.dataset))?;
    if raw.prepared {
        return Err(Error::Input(format!("{} is already prepared", cfg.dataset)));
    }
    let samples = data::preprocess(data::load_dataset(&raw)?, raw.dataset)?;
    dataset_dir(cfg, "prepare", out, &samples, raw.dataset, raw.range)
}

fn synth(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let spec = cfg.synth_spec();
    let samples = data::synth_generate(&spec, cfg.seed)?;
    dataset_dir(
        cfg,
        "synth",
        out,
        &samples,
        DatasetKind::Synthetic,
        spec.range,
    )
}

fn train(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let samples = trainer::load_samples(cfg)?;
    let (train_set, _) = data::split(
        &samples,
        &data::SplitSpec {
            train_fraction: cfg.train_fraction,
            seed: cfg.seed,
        },
    )?;
    let outcome = trainer::train(cfg, &train_set, cfg.seed)?;
    let ck = Checkpoint::new(cfg.seed, &outcome.model, Some(outcome.cca));
    let files = [
        ("checkpoint.json", (ck.to_json() + "\n").into_bytes()),
        (
            "loss_trace.csv",
            report::loss_trace_csv(&[(0, &outcome.loss_trace)]).into_bytes(),
        ),
    ];
    report::write_outputs(
        out,
        &files,
        RunManifest::new("train", cfg.seed, &cfg.to_text()),
    )
}

fn evaluate(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let path = out.join("checkpoint.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ck = Checkpoint::from_json(&text, &path)?;
    let cca = ck
        .cca
        .clone()
        .ok_or_else(|| Error::Input(format!("{} has no CCA projections", path.display())))?;
    let model = ck.model()?;
    let samples = trainer::load_samples(cfg)?;
    let (_, eval_set) = data::split(
        &samples,
        &data::SplitSpec {
            train_fraction: cfg.train_fraction,
            seed: ck.seed,
        },
    )?;
    let evals = trainer::evaluate(&model, &cca, &eval_set, cfg)?;
    let sessions = [(0, ck.seed, &evals)];
    let summary = report::summarize(
        &sessions,
        &report::sha256_hex(cfg.to_text().as_bytes()),
        cfg.effective_lambda(),
        cfg.top_fraction,
    )?;
    let mut manifest = RunManifest::new("evaluate", ck.seed, &cfg.to_text());
    manifest.files.insert(
        "checkpoint.json".into(),
        report::sha256_hex(text.as_bytes()),
    );
    let files = [
        ("summary.json", report::to_json(&summary).into_bytes()),
        (
            "per_query.csv",
            report::per_query_csv(&sessions).into_bytes(),
        ),
    ];
    report::write_outputs(out, &files, manifest)
}

fn experiment(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let samples = trainer::load_samples(cfg)?;
    let rep = trainer::repeat_experiment(cfg, &samples, cfg.sessions)?;
    let sessions: Vec<report::SessionEval<'_>> = rep
        .sessions
        .iter()
        .map(|s| (s.session, s.seed, &s.eval))
        .collect();
    let files = [
        (
            "summary.json",
            report::to_json(&report::experiment_summary(&rep)?).into_bytes(),
        ),
        (
            "per_query.csv",
            report::per_query_csv(&sessions).into_bytes(),
        ),
        (
            "loss_trace.csv",
            report::experiment_traces(&rep).into_bytes(),
        ),
    ];
    report::write_outputs(
        out,
        &files,
        RunManifest::new("report", cfg.seed, &cfg.to_text()),
    )
}

fn sweep(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let samples = trainer::load_samples(cfg)?;
    let rows = trainer::lambda_sweep(cfg, &samples, &trainer::default_lambdas())?;
    let summaries = rows
        .iter()
        .map(|(_, r)| report::experiment_summary(r))
        .collect::<Result<Vec<_>>>()?;
    let files = [
        ("sweep.csv", report::sweep_csv(&rows).into_bytes()),
        ("sweep.json", report::to_json(&summaries).into_bytes()),
    ];
    report::write_outputs(
        out,
        &files,
        RunManifest::new("sweep", cfg.seed, &cfg.to_text()),
    )
}

/// Published presets for real datasets; a small matched network for synthetic data.
pub fn baseline_specs(cfg: &TrainConfig, dataset: DatasetKind) -> Result<Vec<BaselineSpec>> {
    let mut specs = Vec::new();
    for d in Direction::BOTH {
        for k in [EncoderKind::Mlp, EncoderKind::Bigru] {
            specs.push(match dataset {
                DatasetKind::Synthetic => BaselineSpec::synthetic(d, k, cfg.epochs),
                real => BaselineSpec::full_scale(real, d, k)?,
            });
        }
    }
    Ok(specs)
}

fn baseline(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let samples = trainer::load_samples(cfg)?;
    let kind = samples
        .first()
        .map_or(DatasetKind::Synthetic, |s| s.dataset);
    let reports = baseline_specs(cfg, kind)?
        .iter()
        .map(|spec| repeat_baseline(spec, &samples, cfg.train_fraction, cfg.seed, cfg.sessions))
        .collect::<Result<Vec<_>>>()?;
    let json: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "baseline": r.spec.name(),
                "direction": r.spec.direction,
                "spec": r.spec,
                "mrr": r.mrr(),
                "ar": r.ar(),
            })
        })
        .collect();
    let files = [
        (
            "baselines.csv",
            report::baselines_csv(&reports).into_bytes(),
        ),
        ("baselines.json", report::to_json(&json).into_bytes()),
    ];
    report::write_outputs(
        out,
        &files,
        RunManifest::new("baseline", cfg.seed, &cfg.to_text()),
    )
}
