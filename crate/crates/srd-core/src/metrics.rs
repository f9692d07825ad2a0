//! Sequence-overlap and cross-entropy metrics used for reflection scoring
//! and evaluation. All cross-entropies are in nats.

use thiserror::Error;

use crate::corpus::TokenId;

/// Errors raised by [`token_cross_entropy`].
#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("got {dists} distributions for {targets} targets")]
    LengthMismatch { dists: usize, targets: usize },
    #[error("distribution at position {position} sums to {sum}, not 1")]
    NotNormalized { position: usize, sum: f64 },
    #[error("distribution at position {position} has a negative or non-finite entry")]
    BadProbability { position: usize },
    #[error("target {target} out of range at position {position} (support {support})")]
    TargetOutOfRange {
        position: usize,
        target: TokenId,
        support: usize,
    },
    #[error("zero probability at target token (position {position})")]
    ZeroProbability { position: usize },
}

/// Length of the longest common subsequence of `a` and `b` (classic O(mn)
/// dynamic program).
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // One-row rolling DP: table[j] holds lcs(a[..i], b[..j]).
    let mut table = vec![0usize; b.len() + 1];
    for item in a {
        let mut diag = 0;
        for (j, other) in b.iter().enumerate() {
            let above = table[j + 1];
            table[j + 1] = if item == other {
                diag + 1
            } else {
                above.max(table[j])
            };
            diag = above;
        }
    }
    table[b.len()]
}

/// ROUGE-L precision / recall / balanced F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// ROUGE-L of `candidate` against `reference`: precision = LCS/|candidate|,
/// recall = LCS/|reference|, F1 = 2PR/(P+R). Empty inputs (and a zero LCS)
/// score 0 across the board.
pub fn rouge_l<T: PartialEq>(reference: &[T], candidate: &[T]) -> RougeScore {
    let zero = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    if reference.is_empty() || candidate.is_empty() {
        return zero;
    }
    let lcs = lcs_length(reference, candidate) as f64;
    if lcs == 0.0 {
        return zero;
    }
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    RougeScore {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall),
    }
}

/// Total / mean cross-entropy over a scored sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeResult {
    pub total_nats: f64,
    pub mean_nats: f64,
    pub token_count: usize,
}

impl CeResult {
    /// The empty-sequence result (zero nats over zero tokens).
    pub fn empty() -> Self {
        CeResult {
            total_nats: 0.0,
            mean_nats: 0.0,
            token_count: 0,
        }
    }
}

/// Cross-entropy of `targets` under per-position `dists`: the sum of
/// `-ln dists[i][targets[i]]`. Each distribution must be non-negative and
/// sum to 1 within 1e-6; a zero probability at a target is a domain error.
pub fn token_cross_entropy(
    dists: &[Vec<f64>],
    targets: &[TokenId],
) -> Result<CeResult, MetricsError> {
    if dists.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            dists: dists.len(),
            targets: targets.len(),
        });
    }
    let mut total = 0.0f64;
    for (position, (dist, &target)) in dists.iter().zip(targets).enumerate() {
        let mut sum = 0.0f64;
        for &p in dist {
            if !p.is_finite() || p < 0.0 {
                return Err(MetricsError::BadProbability { position });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotNormalized { position, sum });
        }
        let p = *dist
            .get(target as usize)
            .ok_or(MetricsError::TargetOutOfRange {
                position,
                target,
                support: dist.len(),
            })?;
        if p == 0.0 {
            return Err(MetricsError::ZeroProbability { position });
        }
        total -= p.ln();
    }
    if targets.is_empty() {
        return Ok(CeResult::empty());
    }
    Ok(CeResult {
        total_nats: total,
        mean_nats: total / targets.len() as f64,
        token_count: targets.len(),
    })
}
