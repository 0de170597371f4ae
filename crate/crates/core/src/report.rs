//! Machine-readable run outputs: `summary.json`, `per_query.csv`,
//! `loss_trace.csv`, sweep and baseline tables, and the run `manifest.json`.
//!
//! Floats are written in shortest round-trip form so identical runs produce
//! identical bytes. Nothing time-dependent is written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineReport;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::RNG_ALGORITHM;
use crate::retrieval::{self, Direction};
use crate::trainer::{DirectionEval, ExperimentReport, MeanStd};

pub const SUMMARY_SCHEMA: &str = "mer-summary/1";
pub const MANIFEST_SCHEMA: &str = "mer-run/1";
pub const PER_QUERY_HEADER: &str = "session,direction,query_id,rank,top_ids,top_similarities";
pub const LOSS_TRACE_HEADER: &str = "session,epoch,loss";
pub const SWEEP_HEADER: &str =
    "lambda,m2e_mrr_mean,m2e_mrr_std,m2e_ar_mean,m2e_ar_std,e2m_mrr_mean,e2m_mrr_std,e2m_ar_mean,e2m_ar_std";
pub const BASELINE_HEADER: &str = "baseline,direction,session,seed,mrr,ar";
/// Candidates listed per query in `per_query.csv`.
pub const TOP_LISTED: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMetrics {
    pub session: usize,
    pub seed: u64,
    pub queries: usize,
    pub mrr: f64,
    pub ar: f64,
    pub cosine_mean: f64,
    pub cosine_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSummary {
    pub mrr: MeanStd,
    pub ar: MeanStd,
    /// Pooled over every query of every session.
    pub top_fraction_cosine: MeanStd,
    pub sessions: Vec<SessionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub schema: String,
    pub config_sha256: String,
    pub lambda: f64,
    pub top_fraction: f64,
    pub m2e: DirectionSummary,
    pub e2m: DirectionSummary,
}

/// One evaluated session: index, seed and both directions.
pub type SessionEval<'a> = (usize, u64, &'a [DirectionEval; 2]);

pub fn summarize(
    sessions: &[SessionEval<'_>],
    config_sha256: &str,
    lambda: f64,
    top_fraction: f64,
) -> Result<Summary> {
    if sessions.is_empty() {
        return Err(Error::Input("no sessions to summarize".into()));
    }
    let direction = |d: Direction| {
        let per: Vec<SessionMetrics> = sessions
            .iter()
            .map(|(i, seed, evals)| {
                let e = &evals[d as usize];
                SessionMetrics {
                    session: *i,
                    seed: *seed,
                    queries: e.results.len(),
                    mrr: e.mrr,
                    ar: e.ar,
                    cosine_mean: e.cosine_mean,
                    cosine_std: e.cosine_std,
                }
            })
            .collect();
        let pooled: Vec<f64> = sessions
            .iter()
            .flat_map(|(_, _, evals)| evals[d as usize].cosines.iter().copied())
            .collect();
        DirectionSummary {
            mrr: MeanStd::of(&per.iter().map(|s| s.mrr).collect::<Vec<_>>()),
            ar: MeanStd::of(&per.iter().map(|s| s.ar).collect::<Vec<_>>()),
            top_fraction_cosine: MeanStd::of(&pooled),
            sessions: per,
        }
    };
    Ok(Summary {
        schema: SUMMARY_SCHEMA.into(),
        config_sha256: config_sha256.into(),
        lambda,
        top_fraction,
        m2e: direction(Direction::MusicToEmotion),
        e2m: direction(Direction::EmotionToMusic),
    })
}

pub fn experiment_summary(report: &ExperimentReport) -> Result<Summary> {
    let sessions: Vec<SessionEval<'_>> = report
        .sessions
        .iter()
        .map(|s| (s.session, s.seed, &s.eval))
        .collect();
    summarize(
        &sessions,
        &sha256_hex(report.config.to_text().as_bytes()),
        report.config.effective_lambda(),
        report.config.top_fraction,
    )
}

/// Quotes a CSV field when it contains a separator, quote or newline.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn per_query_csv(sessions: &[SessionEval<'_>]) -> String {
    let mut out = format!("{PER_QUERY_HEADER}\n");
    for (i, _, evals) in sessions {
        for e in evals.iter() {
            for r in &e.results {
                let top = &r.ranked[..r.ranked.len().min(TOP_LISTED)];
                let ids: Vec<&str> = top.iter().map(|(id, _)| id.as_str()).collect();
                let sims: Vec<String> = top.iter().map(|(_, s)| s.to_string()).collect();
                writeln!(
                    out,
                    "{i},{},{},{},{},{}",
                    e.direction.as_str(),
                    field(&r.query_id),
                    r.rank,
                    field(&ids.join(";")),
                    sims.join(";")
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn loss_trace_csv(traces: &[(usize, &[f64])]) -> String {
    let mut out = format!("{LOSS_TRACE_HEADER}\n");
    for (session, trace) in traces {
        for (epoch, loss) in trace.iter().enumerate() {
            writeln!(out, "{session},{},{loss}", epoch + 1).unwrap();
        }
    }
    out
}

pub fn experiment_traces(report: &ExperimentReport) -> String {
    let traces: Vec<(usize, &[f64])> = report
        .sessions
        .iter()
        .map(|s| (s.session, s.outcome.loss_trace.as_slice()))
        .collect();
    loss_trace_csv(&traces)
}

pub fn sweep_csv(rows: &[(f64, ExperimentReport)]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for (lambda, r) in rows {
        let mut cells = vec![format!("{lambda:.1}")];
        for d in Direction::BOTH {
            let (m, a) = (r.mrr(d), r.ar(d));
            cells.extend([m.mean, m.std, a.mean, a.std].map(|v| v.to_string()));
        }
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    out
}

pub fn baselines_csv(reports: &[BaselineReport]) -> String {
    let mut out = format!("{BASELINE_HEADER}\n");
    for r in reports {
        for (i, (seed, e)) in r.sessions.iter().enumerate() {
            writeln!(
                out,
                "{},{},{i},{seed},{},{}",
                r.spec.name(),
                r.spec.direction.as_str(),
                e.mrr,
                e.ar
            )
            .unwrap();
        }
    }
    out
}

/// Everything needed to rerun a command: the full config text plus the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub verb: String,
    pub version: String,
    pub rng: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: String,
    /// SHA-256 of every other file written by the run.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(verb: &str, seed: u64, config_text: &str) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            verb: verb.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            rng: RNG_ALGORITHM.into(),
            seed,
            config_sha256: sha256_hex(config_text.as_bytes()),
            config: config_text.into(),
            files: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Writes each file atomically under `dir`, then `manifest.json` listing their hashes.
pub fn write_outputs(
    dir: &Path,
    files: &[(&str, Vec<u8>)],
    mut manifest: RunManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
        manifest
            .files
            .insert((*name).to_string(), sha256_hex(bytes));
    }
    write_atomic(&dir.join("manifest.json"), to_json(&manifest).as_bytes())
}

/// Re-derives MRR/AR from the ranks of a direction; used to cross-check summaries.
pub fn recompute(e: &DirectionEval) -> Result<(f64, f64)> {
    let ranks = e.ranks();
    Ok((retrieval::mrr(&ranks)?, retrieval::ar(&ranks)?))
}
