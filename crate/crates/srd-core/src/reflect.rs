//! Student-informed difficulty scoring and data curation.
//!
//! The (pre-distillation) student decodes its own answer to every prompt.
//! Each pair is then scored two ways:
//!
//! - ROUGE-L F1 between the student's output and the reference response
//!   (higher means the pair is easier for this student), and
//! - mean per-token cross-entropy the student assigns to a response
//!   (lower means easier). Which response is scored is configurable:
//!   the student's own output (default) or the ground-truth reference.
//!
//! Each metric yields a full ranking (rank 1 = easiest, ties broken by
//! dataset order), the rankings are fused with reciprocal-rank fusion, and
//! the easiest `floor(lambda * N)` pairs are kept, ordered easiest-first.
//! That curated, ordered list is what the curriculum consumes.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, PromptResponsePair, TokenId};
use crate::metrics::rouge_l;
use crate::seeding::{derive_seed, STREAM_REFLECT_DECODE};
use crate::tinylm::{greedy_decode, sample_decode, sequence_ce, ModelError, TinyLm};

/// Default fraction of the corpus kept after curation.
pub const DEFAULT_LAMBDA: f64 = 0.75;
/// Default reciprocal-rank-fusion constant.
pub const DEFAULT_RRF_K: f64 = 60.0;
/// Default decode length for the student's reflection outputs.
pub const DEFAULT_REFLECT_MAX_LEN: usize = 16;

/// Which response the cross-entropy metric scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeSource {
    /// The student's own decoded output. An empty decode carries no tokens
    /// to score, so the metric falls back to the reference response rather
    /// than awarding 0 nats to a model that produced nothing.
    StudentOutput,
    /// The reference response (the default: deterministic and immune to
    /// degenerate decodes).
    GroundTruth,
}

impl FromStr for CeSource {
    type Err = ReflectError;

    fn from_str(s: &str) -> Result<Self, ReflectError> {
        match s {
            "student_output" => Ok(CeSource::StudentOutput),
            "ground_truth" => Ok(CeSource::GroundTruth),
            other => Err(ReflectError::UnknownName {
                what: "ce source",
                got: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for CeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CeSource::StudentOutput => "student_output",
            CeSource::GroundTruth => "ground_truth",
        })
    }
}

/// Which metric rankings feed the fused difficulty score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Reciprocal-rank fusion of the ROUGE and cross-entropy rankings.
    Fusion,
    /// ROUGE-L ranking alone (ablation).
    RougeOnly,
    /// Cross-entropy ranking alone (ablation).
    CeOnly,
}

impl FromStr for Ranking {
    type Err = ReflectError;

    fn from_str(s: &str) -> Result<Self, ReflectError> {
        match s {
            "fusion" => Ok(Ranking::Fusion),
            "rouge_only" => Ok(Ranking::RougeOnly),
            "ce_only" => Ok(Ranking::CeOnly),
            other => Err(ReflectError::UnknownName {
                what: "ranking",
                got: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ranking::Fusion => "fusion",
            Ranking::RougeOnly => "rouge_only",
            Ranking::CeOnly => "ce_only",
        })
    }
}

/// How the student produces its reflection output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum DecodeStrategy {
    Greedy,
    /// Seeded ancestral sampling; each pair gets its own derived stream.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    /// Maximum decode length for the student's output.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_len: DEFAULT_REFLECT_MAX_LEN,
        }
    }
}

/// Full curation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    /// Fraction of pairs kept; `floor(lambda * N)` survive.
    pub lambda: f64,
    /// Reciprocal-rank-fusion constant `k` in `1 / (k + rank)`.
    pub rrf_k: f64,
    pub ce_source: CeSource,
    pub ranking: Ranking,
    pub decode: DecodeConfig,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            lambda: DEFAULT_LAMBDA,
            rrf_k: DEFAULT_RRF_K,
            ce_source: CeSource::GroundTruth,
            ranking: Ranking::Fusion,
            decode: DecodeConfig::default(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), ReflectError> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(ReflectError::BadLambda(self.lambda));
        }
        if !(self.rrf_k > 0.0 && self.rrf_k.is_finite()) {
            return Err(ReflectError::BadRrfK(self.rrf_k));
        }
        if self.decode.max_len == 0 {
            return Err(ReflectError::ZeroMaxLen);
        }
        if let DecodeStrategy::Sample { temperature, .. } = self.decode.strategy {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(ReflectError::BadTemperature(temperature));
            }
        }
        Ok(())
    }
}

/// Per-pair reflection result, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub pair_id: String,
    /// The student's decoded answer to the prompt.
    pub student_output: Vec<TokenId>,
    /// ROUGE-L F1 of `student_output` against the reference response.
    pub rouge_f: f64,
    /// Mean per-token cross-entropy in nats (see [`CeSource`]).
    pub ce_nats: f64,
    /// 1-based rank under ROUGE (1 = easiest).
    pub rank_rouge: usize,
    /// 1-based rank under cross-entropy (1 = easiest).
    pub rank_ce: usize,
    /// Fused difficulty score; higher = easier.
    pub fused_score: f64,
}

/// Result of reflecting over a dataset.
#[derive(Debug, Clone)]
pub struct ReflectionOutcome {
    /// One record per pair, in dataset order.
    pub records: Vec<ReflectionRecord>,
    /// Ids of the kept pairs, easiest first.
    pub curated: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error("keep fraction must be in (0, 1], got {0}")]
    BadLambda(f64),
    #[error("rank-fusion constant must be positive and finite, got {0}")]
    BadRrfK(f64),
    #[error("sampling temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("reflection decode max_len must be at least 1")]
    ZeroMaxLen,
    #[error("unknown {what} \"{got}\"")]
    UnknownName { what: &'static str, got: String },
    #[error("metric value at index {index} is NaN")]
    NanMetric { index: usize },
    #[error("rank lists must be non-empty and share one length")]
    RankShape,
    #[error("rank list {list} is not a permutation of 1..=n")]
    NotPermutation { list: usize },
    #[error("student vocab has {model} entries but dataset vocab has {data}")]
    VocabMismatch { model: usize, data: usize },
    #[error("cannot reflect over an empty dataset")]
    EmptyDataset,
    #[error("keeping fraction {lambda} of {total} pairs selects nothing")]
    EmptySelection { total: usize, lambda: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("failed writing report to {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Whether larger metric values mean an easier pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankDirection {
    HigherIsEasier,
    LowerIsEasier,
}

/// 1-based easiness ranks (1 = easiest) for one metric. The result is a
/// permutation of `1..=n`: ties are broken toward the earlier index, i.e.
/// dataset order.
pub fn rank_by_metric(
    values: &[f64],
    direction: RankDirection,
) -> Result<Vec<usize>, ReflectError> {
    if let Some(index) = values.iter().position(|v| v.is_nan()) {
        return Err(ReflectError::NanMetric { index });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = match direction {
            RankDirection::HigherIsEasier => values[b].partial_cmp(&values[a]),
            RankDirection::LowerIsEasier => values[a].partial_cmp(&values[b]),
        };
        cmp.expect("NaN ruled out above").then(a.cmp(&b))
    });
    let mut ranks = vec![0; values.len()];
    for (rank0, &i) in order.iter().enumerate() {
        ranks[i] = rank0 + 1;
    }
    Ok(ranks)
}

/// Reciprocal-rank fusion: `fused[i] = sum over lists of 1 / (k + rank)`.
/// Every list must be a permutation of `1..=n`. Higher fused = easier.
pub fn rrf_fuse(rank_lists: &[Vec<usize>], k: f64) -> Result<Vec<f64>, ReflectError> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(ReflectError::BadRrfK(k));
    }
    let n = match rank_lists.first() {
        Some(first) => first.len(),
        None => return Err(ReflectError::RankShape),
    };
    for (which, list) in rank_lists.iter().enumerate() {
        if list.len() != n {
            return Err(ReflectError::RankShape);
        }
        let mut seen = vec![false; n];
        for &r in list {
            if r < 1 || r > n || seen[r - 1] {
                return Err(ReflectError::NotPermutation { list: which });
            }
            seen[r - 1] = true;
        }
    }
    let mut fused = vec![0.0; n];
    for list in rank_lists {
        for (i, &r) in list.iter().enumerate() {
            fused[i] += 1.0 / (k + r as f64);
        }
    }
    Ok(fused)
}

/// Indices of the `floor(lambda * n)` highest-scoring entries, highest
/// first, ties toward the earlier index. The floor carries a tiny absolute
/// guard so decimal fractions land on the intended count (e.g. 0.3 of 10
/// keeps exactly 3).
pub fn select(fused: &[f64], lambda: f64) -> Result<Vec<usize>, ReflectError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(ReflectError::BadLambda(lambda));
    }
    let n = fused.len();
    let n_keep = ((lambda * n as f64) + 1e-9).floor() as usize;
    if n_keep == 0 {
        return Err(ReflectError::EmptySelection { total: n, lambda });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        fused[b]
            .partial_cmp(&fused[a])
            .expect("fused scores are finite")
            .then(a.cmp(&b))
    });
    order.truncate(n_keep.min(n));
    Ok(order)
}

/// Decodes the student's answer and computes both metrics for one pair.
fn score_pair(
    student: &TinyLm,
    pair: &PromptResponsePair,
    index: usize,
    cfg: &CurationConfig,
) -> Result<(Vec<TokenId>, f64, f64), ReflectError> {
    let student_output = match cfg.decode.strategy {
        DecodeStrategy::Greedy => greedy_decode(student, &pair.prompt, cfg.decode.max_len)?,
        DecodeStrategy::Sample { temperature, seed } => sample_decode(
            student,
            &pair.prompt,
            cfg.decode.max_len,
            temperature,
            derive_seed(seed, &[STREAM_REFLECT_DECODE, index as u64]),
        )?,
    };
    let rouge_f = rouge_l(&pair.response, &student_output).f1;
    let scored: &[TokenId] = match cfg.ce_source {
        CeSource::StudentOutput if !student_output.is_empty() => &student_output,
        _ => &pair.response,
    };
    let ce_nats = sequence_ce(student, &pair.prompt, scored, false)?.mean_nats;
    Ok((student_output, rouge_f, ce_nats))
}

/// Scores every pair with the student, ranks, fuses, and selects.
///
/// Prompts longer than the model context are conditioned through the same
/// sliding window training uses; nothing is rejected for length here.
pub fn run_reflection(
    student: &TinyLm,
    data: &Dataset,
    cfg: &CurationConfig,
) -> Result<ReflectionOutcome, ReflectError> {
    cfg.validate()?;
    if data.vocab.len() != student.config.vocab_size {
        return Err(ReflectError::VocabMismatch {
            model: student.config.vocab_size,
            data: data.vocab.len(),
        });
    }
    if data.pairs.is_empty() {
        return Err(ReflectError::EmptyDataset);
    }
    let scored: Vec<(Vec<TokenId>, f64, f64)> = data
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| score_pair(student, pair, i, cfg))
        .collect::<Result<_, _>>()?;
    let rouge: Vec<f64> = scored.iter().map(|(_, r, _)| *r).collect();
    let ce: Vec<f64> = scored.iter().map(|(_, _, c)| *c).collect();
    let rank_rouge = rank_by_metric(&rouge, RankDirection::HigherIsEasier)?;
    let rank_ce = rank_by_metric(&ce, RankDirection::LowerIsEasier)?;
    let fused = match cfg.ranking {
        Ranking::Fusion => rrf_fuse(&[rank_rouge.clone(), rank_ce.clone()], cfg.rrf_k)?,
        Ranking::RougeOnly => rrf_fuse(std::slice::from_ref(&rank_rouge), cfg.rrf_k)?,
        Ranking::CeOnly => rrf_fuse(std::slice::from_ref(&rank_ce), cfg.rrf_k)?,
    };
    let records: Vec<ReflectionRecord> = scored
        .into_iter()
        .enumerate()
        .map(|(i, (student_output, rouge_f, ce_nats))| ReflectionRecord {
            pair_id: data.pairs[i].id.clone(),
            student_output,
            rouge_f,
            ce_nats,
            rank_rouge: rank_rouge[i],
            rank_ce: rank_ce[i],
            fused_score: fused[i],
        })
        .collect();
    let curated = select(&fused, cfg.lambda)?
        .into_iter()
        .map(|i| data.pairs[i].id.clone())
        .collect();
    Ok(ReflectionOutcome { records, curated })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    #[serde(flatten)]
    record: &'a ReflectionRecord,
    kept: bool,
}

/// Writes one JSON object per pair (dataset order) with the reflection
/// fields plus a `kept` flag. Output bytes are deterministic.
pub fn write_report(path: impl AsRef<Path>, outcome: &ReflectionOutcome) -> Result<(), ReflectError> {
    let path = path.as_ref();
    let kept: HashSet<&str> = outcome.curated.iter().map(String::as_str).collect();
    let mut buf = Vec::new();
    for record in &outcome.records {
        let row = ReportRow {
            record,
            kept: kept.contains(record.pair_id.as_str()),
        };
        serde_json::to_writer(&mut buf, &row)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|source| ReflectError::Io {
        path: path.display().to_string(),
        source,
    })
}
