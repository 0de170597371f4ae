//! Bidirectional cross-modal retrieval: Pearson/negative-KL similarity,
//! candidate ranking, MRR/AR and the top-fraction cosine analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{kl_diag, GaussianEmbedding};

/// Retrieval direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Music query, emotion candidates.
    #[serde(rename = "m2e")]
    MusicToEmotion,
    /// Emotion query, music candidates.
    #[serde(rename = "e2m")]
    EmotionToMusic,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::MusicToEmotion, Direction::EmotionToMusic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MusicToEmotion => "m2e",
            Self::EmotionToMusic => "e2m",
        }
    }
}

/// Order of the arguments of the KL term in [`similarity`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(query ‖ candidate)`.
    #[default]
    QueryToCandidate,
    CandidateToQuery,
}

impl std::str::FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query-to-candidate" => Ok(Self::QueryToCandidate),
            "candidate-to-query" => Ok(Self::CandidateToQuery),
            other => Err(Error::Config(format!(
                "unknown KL direction '{other}' (expected query-to-candidate or candidate-to-query)"
            ))),
        }
    }
}

impl std::fmt::Display for KlDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::QueryToCandidate => "query-to-candidate",
            Self::CandidateToQuery => "candidate-to-query",
        })
    }
}

/// One sample's inference outputs in one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutput {
    pub id: String,
    /// Canonical embedding `Wᵀ(E_raw − centre)`.
    pub embedding: Vec<f64>,
    pub gaussian: GaussianEmbedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    /// Candidate ids with similarities, most similar first.
    pub ranked: Vec<(String, f64)>,
    /// 1-based rank of the ground truth.
    pub rank: usize,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("pearson", format!("{} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 components, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `λ·pearson(E_q, E_c) − (1−λ)·KL`. A term with zero weight is not evaluated.
pub fn similarity(
    q: &QueryOutput,
    c: &QueryOutput,
    lambda: f64,
    kl_dir: KlDirection,
) -> Result<f64> {
    let mut s = 0.0;
    if lambda > 0.0 {
        s += lambda * pearson(&q.embedding, &c.embedding)?;
    }
    if lambda < 1.0 {
        let kl = match kl_dir {
            KlDirection::QueryToCandidate => kl_diag(&q.gaussian, &c.gaussian)?,
            KlDirection::CandidateToQuery => kl_diag(&c.gaussian, &q.gaussian)?,
        };
        s += (1.0 - lambda) * -kl;
    }
    Ok(s)
}

/// `1 + #{candidates strictly more similar than the ground truth}`.
pub fn rank_of(similarities: &[f64], ground_truth: usize) -> usize {
    let gt = similarities[ground_truth];
    1 + similarities.iter().filter(|&&s| s > gt).count()
}

/// Candidate order by descending similarity; ties keep input order.
pub fn order_by_similarity(similarities: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..similarities.len()).collect();
    idx.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]));
    idx
}

/// Ranks candidates given precomputed similarities.
pub fn rank_similarities(
    query_id: &str,
    candidate_ids: &[String],
    similarities: &[f64],
    ground_truth: &str,
) -> Result<RankedResult> {
    if candidate_ids.len() != similarities.len() {
        return Err(Error::Pairing(format!(
            "{} candidates vs {} similarities",
            candidate_ids.len(),
            similarities.len()
        )));
    }
    let gt = candidate_ids
        .iter()
        .position(|id| id == ground_truth)
        .ok_or_else(|| {
            Error::Input(format!(
                "ground truth '{ground_truth}' not among candidates"
            ))
        })?;
    let ranked = order_by_similarity(similarities)
        .into_iter()
        .map(|i| (candidate_ids[i].clone(), similarities[i]))
        .collect();
    Ok(RankedResult {
        query_id: query_id.to_string(),
        ranked,
        rank: rank_of(similarities, gt),
    })
}

pub fn rank_candidates(
    q: &QueryOutput,
    candidates: &[QueryOutput],
    ground_truth: &str,
    lambda: f64,
    kl_dir: KlDirection,
) -> Result<RankedResult> {
    let sims = candidates
        .iter()
        .map(|c| similarity(q, c, lambda, kl_dir))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
    rank_similarities(&q.id, &ids, &sims, ground_truth)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Input("no ranks to average".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn ar(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Input("no ranks to average".into()));
    }
    Ok(ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine("zero-norm vector".into()));
    }
    Ok(dot / (na * nb))
}

/// `⌈fraction·n⌉`, at least one.
pub fn top_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Mean cosine between the query's overall vector and those of its top-ranked candidates.
pub fn top_fraction_cosine(
    query: &[f64],
    candidates: &[(String, Vec<f64>)],
    ranked_ids: &[String],
    fraction: f64,
) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Input("no candidates".into()));
    }
    let count = top_count(candidates.len(), fraction);
    let mut total = 0.0;
    for id in ranked_ids.iter().take(count) {
        let (_, v) = candidates
            .iter()
            .find(|(cid, _)| cid == id)
            .ok_or_else(|| Error::Input(format!("ranked id '{id}' not among candidates")))?;
        total += cosine(query, v)?;
    }
    Ok(total / count as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomState;
    use proptest::prelude::*;

    fn output(id: &str, e: &[f64], mean: &[f64], var: &[f64]) -> QueryOutput {
        QueryOutput {
            id: id.into(),
            embedding: e.to_vec(),
            gaussian: GaussianEmbedding::new(mean.to_vec(), var.to_vec()).unwrap(),
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        let expected = 9.0 / (2.0 * 21f64.sqrt());
        assert!((pearson(&x, &[1.0, 2.0, 4.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.981981).abs() < 1e-6);
        assert!(matches!(
            pearson(&x, &[2.0, 2.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn similarity_endpoints() {
        let q = output("q", &[1.0, 2.0, 3.0], &[0.0, 0.0], &[1.0, 1.0]);
        let c = output("c", &[3.0, 2.0, 1.5], &[1.0, -1.0], &[2.0, 0.5]);
        let p = pearson(&q.embedding, &c.embedding).unwrap();
        let kl = kl_diag(&q.gaussian, &c.gaussian).unwrap();
        let dir = KlDirection::QueryToCandidate;
        assert_eq!(similarity(&q, &c, 1.0, dir).unwrap(), p);
        assert_eq!(similarity(&q, &c, 0.0, dir).unwrap(), -kl);
        assert_eq!(similarity(&q, &q, 0.0, dir).unwrap(), 0.0);
        let mixed = similarity(&q, &c, 0.6, dir).unwrap();
        assert!((mixed - (0.6 * p - 0.4 * kl)).abs() < 1e-15);
        assert!((0.6f64 * 0.5 + 0.4 * -2.0 + 0.5).abs() < 1e-15);
        let rev = similarity(&q, &c, 0.0, KlDirection::CandidateToQuery).unwrap();
        assert_eq!(rev, -kl_diag(&c.gaussian, &q.gaussian).unwrap());
    }

    #[test]
    fn rank_examples() {
        let ids: Vec<String> = ["A", "B", "GT"].iter().map(|s| s.to_string()).collect();
        let r = rank_similarities("q", &ids, &[0.9, 0.5, 0.7], "GT").unwrap();
        assert_eq!(r.rank, 2);
        assert_eq!(r.ranked[0].0, "A");
        let r = rank_similarities("q", &ids, &[0.1, 0.5, 0.7], "GT").unwrap();
        assert_eq!(r.rank, 1);
        let r = rank_similarities("q", &ids, &[0.7, 0.7, 0.7], "GT").unwrap();
        assert_eq!(r.rank, 1);
        assert!(matches!(
            rank_similarities("q", &ids, &[0.1, 0.5, 0.7], "missing"),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn identical_gaussian_is_top_at_kl_only() {
        let mut rng = RandomState::new(1);
        let q = output("q", &[1.0, 0.0], &[0.3, -0.2], &[0.7, 1.1]);
        let mut cands: Vec<QueryOutput> = (0..10)
            .map(|i| {
                output(
                    &format!("c{i}"),
                    &[rng.normal(), rng.normal()],
                    &[rng.normal(), rng.normal()],
                    &[rng.uniform_range(0.1, 2.0), rng.uniform_range(0.1, 2.0)],
                )
            })
            .collect();
        cands.push(QueryOutput {
            id: "twin".into(),
            ..q.clone()
        });
        let r = rank_candidates(&q, &cands, "twin", 0.0, KlDirection::QueryToCandidate).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.ranked[0].0, "twin");
    }

    #[test]
    fn metric_examples() {
        assert!((mrr(&[1, 2, 4]).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert!((ar(&[1, 2, 4]).unwrap() - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(ar(&[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(mrr(&[]), Err(Error::Input(_))));
        assert!(ar(&[]).is_err());
    }

    #[test]
    fn chance_average_rank() {
        let mut rng = RandomState::new(3);
        let n = 361;
        let ranks: Vec<usize> = (0..n).map(|_| rng.int_inclusive(1, n)).collect();
        let a = ar(&ranks).unwrap();
        assert!((a - 181.0).abs() <= 11.0, "{a}");
    }

    proptest! {
        #[test]
        fn mrr_at_least_inverse_ar(ranks in prop::collection::vec(1usize..500, 1..100)) {
            prop_assert!(mrr(&ranks).unwrap() >= 1.0 / ar(&ranks).unwrap() - 1e-12);
        }

        #[test]
        fn rank_permutation_invariant(seed in 0u64..500) {
            let mut rng = RandomState::new(seed);
            let n = 12;
            let sims: Vec<f64> = (0..n).map(|_| (rng.normal() * 4.0).round() / 4.0).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let base = rank_similarities("q", &ids, &sims, "c3").unwrap().rank;
            let mut pairs: Vec<(String, f64)> = ids.into_iter().zip(sims).collect();
            rng.shuffle(&mut pairs);
            let (ids, sims): (Vec<String>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert_eq!(rank_similarities("q", &ids, &sims, "c3").unwrap().rank, base);
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(top_count(37, 0.05), 2);
        assert_eq!(top_count(40, 0.05), 2);
        assert_eq!(top_count(361, 0.05), 19);
        assert_eq!(top_count(3, 0.05), 1);
        let v = vec![0.3, -0.4];
        let cands: Vec<(String, Vec<f64>)> = (0..5).map(|i| (format!("c{i}"), v.clone())).collect();
        let ranked: Vec<String> = cands.iter().map(|c| c.0.clone()).collect();
        let c = top_fraction_cosine(&v, &cands, &ranked, 0.05).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &v),
            Err(Error::UndefinedCosine(_))
        ));
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
