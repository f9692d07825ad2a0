//! Tempered softmax and the distillation divergence family.
//!
//! Six divergences D(p || q) between a teacher distribution p and a student
//! distribution q, each with an analytic gradient with respect to the
//! student logits:
//!
//! - `kld`:  sum p ln(p/q)
//! - `rkl`:  sum q ln(q/p)
//! - `jsd`:  (kld(p,m) + kld(q,m)) / 2 with m = (p+q)/2
//! - `tvd`:  sum |p - q| / 2
//! - `skl`:  kld(p, beta*p + (1-beta)*q)   (skewed forward KL)
//! - `srkl`: kld(q, (1-beta)*p + beta*q)   (skewed reverse KL)
//!
//! Probabilities are produced by [`temp_softmax`], which floors every entry
//! at [`PROB_FLOOR`] and renormalizes, so logarithms never see a zero. The
//! floor is a numerical guard only: for the moderate logits exercised by
//! training and by the gradient tests it never binds, which is what makes
//! the analytic gradients match finite differences.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Probability floor applied after softmax normalization.
pub const PROB_FLOOR: f64 = 1e-12;

/// Errors raised by distribution construction and divergence evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("empty logit or probability vector")]
    Empty,
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("negative probability at index {0}")]
    Negative(usize),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("temperature must be positive and finite (got {0})")]
    BadTau(f64),
    #[error("beta must lie in [0, 1] (got {0})")]
    BadBeta(f64),
    #[error("alpha must lie in [0, 1] (got {0})")]
    BadAlpha(f64),
    #[error("support mismatch: {left} vs {right}")]
    SupportMismatch { left: usize, right: usize },
    #[error("unknown divergence {0:?} (expected kld, rkl, jsd, tvd, skl, or srkl)")]
    UnknownKind(String),
}

/// A floored, normalized probability vector. Construction is the only way to
/// obtain one, so every entry is strictly positive and the sum is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates (non-negative, finite, sums to 1 within 1e-6), then floors
    /// and renormalizes.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, DivergenceError> {
        if probs.is_empty() {
            return Err(DivergenceError::Empty);
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(DivergenceError::NonFinite(i));
            }
            if p < 0.0 {
                return Err(DivergenceError::Negative(i));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DivergenceError::NotNormalized(sum));
        }
        Ok(Self::floor_and_normalize(probs))
    }

    fn floor_and_normalize(mut probs: Vec<f64>) -> Self {
        for p in &mut probs {
            if *p < PROB_FLOOR {
                *p = PROB_FLOOR;
            }
        }
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Distribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Temperature softmax with max-subtraction: `softmax(z / tau)`, floored and
/// renormalized. Shift-invariant in the logits; `tau` must be positive.
pub fn temp_softmax(logits: &[f64], tau: f64) -> Result<Distribution, DivergenceError> {
    if logits.is_empty() {
        return Err(DivergenceError::Empty);
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(DivergenceError::BadTau(tau));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(DivergenceError::NonFinite(i));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Distribution::floor_and_normalize(
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}

/// The divergence family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    Kld,
    Rkl,
    Jsd,
    Tvd,
    Skl,
    Srkl,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 6] = [
        DivergenceKind::Kld,
        DivergenceKind::Rkl,
        DivergenceKind::Jsd,
        DivergenceKind::Tvd,
        DivergenceKind::Skl,
        DivergenceKind::Srkl,
    ];
}

impl FromStr for DivergenceKind {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self, DivergenceError> {
        match s {
            "kld" => Ok(DivergenceKind::Kld),
            "rkl" => Ok(DivergenceKind::Rkl),
            "jsd" => Ok(DivergenceKind::Jsd),
            "tvd" => Ok(DivergenceKind::Tvd),
            "skl" => Ok(DivergenceKind::Skl),
            "srkl" => Ok(DivergenceKind::Srkl),
            other => Err(DivergenceError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DivergenceKind::Kld => "kld",
            DivergenceKind::Rkl => "rkl",
            DivergenceKind::Jsd => "jsd",
            DivergenceKind::Tvd => "tvd",
            DivergenceKind::Skl => "skl",
            DivergenceKind::Srkl => "srkl",
        };
        f.write_str(name)
    }
}

/// Which divergence to use, its skew, the distillation temperature, and
/// whether the per-position terms are scaled by tau^2 (keeping KD gradient
/// magnitudes comparable across temperatures).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    /// Skew for `skl` / `srkl`; ignored by the other kinds.
    pub beta: f64,
    pub tau: f64,
    pub tau_sq_scaling: bool,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        DivergenceSpec {
            kind: DivergenceKind::Kld,
            beta: 0.1,
            tau: 1.0,
            tau_sq_scaling: true,
        }
    }
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<(), DivergenceError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(DivergenceError::BadTau(self.tau));
        }
        if !(0.0..=1.0).contains(&self.beta) || !self.beta.is_finite() {
            return Err(DivergenceError::BadBeta(self.beta));
        }
        Ok(())
    }

    /// The same spec at a different temperature (curriculum stages swap tau).
    pub fn at_tau(&self, tau: f64) -> Self {
        DivergenceSpec { tau, ..*self }
    }
}

fn check_support(p: &Distribution, q: &Distribution) -> Result<(), DivergenceError> {
    if p.len() != q.len() {
        return Err(DivergenceError::SupportMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<(), DivergenceError> {
    if !(0.0..=1.0).contains(&beta) || !beta.is_finite() {
        return Err(DivergenceError::BadBeta(beta));
    }
    Ok(())
}

/// Forward Kullback-Leibler divergence, sum p ln(p/q).
pub fn kld(p: &Distribution, q: &Distribution) -> Result<f64, DivergenceError> {
    check_support(p, q)?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// Reverse Kullback-Leibler divergence, sum q ln(q/p) (student-weighted).
pub fn rkl(p: &Distribution, q: &Distribution) -> Result<f64, DivergenceError> {
    kld(q, p)
}

/// Jensen-Shannon divergence against the even mixture m = (p+q)/2. Symmetric
/// and bounded by ln 2.
pub fn jsd(p: &Distribution, q: &Distribution) -> Result<f64, DivergenceError> {
    check_support(p, q)?;
    let m: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| 0.5 * (pi + qi))
        .collect();
    let half_kl = |a: &[f64]| -> f64 {
        a.iter()
            .zip(&m)
            .map(|(&ai, &mi)| ai * (ai / mi).ln())
            .sum::<f64>()
    };
    Ok(0.5 * half_kl(p.probs()) + 0.5 * half_kl(q.probs()))
}

/// Total variation distance, sum |p - q| / 2. Bounded by 1.
pub fn tvd(p: &Distribution, q: &Distribution) -> Result<f64, DivergenceError> {
    check_support(p, q)?;
    Ok(0.5
        * p.probs()
            .iter()
            .zip(q.probs())
            .map(|(&pi, &qi)| (pi - qi).abs())
            .sum::<f64>())
}

/// Skewed forward KL: kld(p, beta*p + (1-beta)*q). Reduces to `kld` at
/// beta = 0 and to zero at beta = 1.
pub fn skl(p: &Distribution, q: &Distribution, beta: f64) -> Result<f64, DivergenceError> {
    check_support(p, q)?;
    check_beta(beta)?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| {
            let ri = beta * pi + (1.0 - beta) * qi;
            pi * (pi / ri).ln()
        })
        .sum())
}

/// Skewed reverse KL: kld(q, (1-beta)*p + beta*q). Reduces to `rkl` at
/// beta = 0 and to zero at beta = 1.
pub fn srkl(p: &Distribution, q: &Distribution, beta: f64) -> Result<f64, DivergenceError> {
    check_support(p, q)?;
    check_beta(beta)?;
    Ok(q.probs()
        .iter()
        .zip(p.probs())
        .map(|(&qi, &pi)| {
            let ri = (1.0 - beta) * pi + beta * qi;
            qi * (qi / ri).ln()
        })
        .sum())
}

/// Dispatch on `kind`, using `beta` only where it applies.
pub fn divergence(
    kind: DivergenceKind,
    p: &Distribution,
    q: &Distribution,
    beta: f64,
) -> Result<f64, DivergenceError> {
    match kind {
        DivergenceKind::Kld => kld(p, q),
        DivergenceKind::Rkl => rkl(p, q),
        DivergenceKind::Jsd => jsd(p, q),
        DivergenceKind::Tvd => tvd(p, q),
        DivergenceKind::Skl => skl(p, q, beta),
        DivergenceKind::Srkl => srkl(p, q, beta),
    }
}

/// dD/dq for one position, before projection through the softmax Jacobian.
fn divergence_q_grad(
    kind: DivergenceKind,
    p: &[f64],
    q: &[f64],
    beta: f64,
) -> Vec<f64> {
    match kind {
        DivergenceKind::Kld => p.iter().zip(q).map(|(&pi, &qi)| -pi / qi).collect(),
        DivergenceKind::Rkl => p
            .iter()
            .zip(q)
            .map(|(&pi, &qi)| (qi / pi).ln() + 1.0)
            .collect(),
        DivergenceKind::Jsd => p
            .iter()
            .zip(q)
            .map(|(&pi, &qi)| {
                let mi = 0.5 * (pi + qi);
                0.5 * (qi / mi).ln()
            })
            .collect(),
        // Subgradient of |q - p| with sign(0) = 0, so identical
        // distributions get an exactly zero gradient.
        DivergenceKind::Tvd => p
            .iter()
            .zip(q)
            .map(|(&pi, &qi)| {
                if qi > pi {
                    0.5
                } else if qi < pi {
                    -0.5
                } else {
                    0.0
                }
            })
            .collect(),
        DivergenceKind::Skl => p
            .iter()
            .zip(q)
            .map(|(&pi, &qi)| {
                let ri = beta * pi + (1.0 - beta) * qi;
                -(1.0 - beta) * pi / ri
            })
            .collect(),
        DivergenceKind::Srkl => p
            .iter()
            .zip(q)
            .map(|(&pi, &qi)| {
                let ri = (1.0 - beta) * pi + beta * qi;
                (qi / ri).ln() + 1.0 - beta * qi / ri
            })
            .collect(),
    }
}

/// Analytic gradient of the (optionally tau^2-scaled) divergence at one
/// position with respect to the **student logits**.
///
/// Both distributions are formed by `temp_softmax` at `spec.tau`; the
/// softmax Jacobian dq_j/dz_m = q_j (delta_jm - q_m) / tau projects dD/dq
/// onto the logits.
pub fn kd_grad(
    teacher_logits: &[f64],
    student_logits: &[f64],
    spec: &DivergenceSpec,
) -> Result<Vec<f64>, DivergenceError> {
    spec.validate()?;
    if teacher_logits.len() != student_logits.len() {
        return Err(DivergenceError::SupportMismatch {
            left: teacher_logits.len(),
            right: student_logits.len(),
        });
    }
    let p = temp_softmax(teacher_logits, spec.tau)?;
    let q = temp_softmax(student_logits, spec.tau)?;
    let g = divergence_q_grad(spec.kind, p.probs(), q.probs(), spec.beta);
    let dot: f64 = g.iter().zip(q.probs()).map(|(&gi, &qi)| gi * qi).sum();
    let scale = if spec.tau_sq_scaling {
        spec.tau // tau^2 scaling combined with the Jacobian's 1/tau
    } else {
        1.0 / spec.tau
    };
    Ok(q.probs()
        .iter()
        .zip(&g)
        .map(|(&qi, &gi)| scale * qi * (gi - dot))
        .collect())
}

/// Per-position divergence sum over one sequence: sum_i D(p_i || q_i),
/// scaled by tau^2 when the spec says so.
pub fn kd_loss(
    teacher_logits: &[Vec<f64>],
    student_logits: &[Vec<f64>],
    spec: &DivergenceSpec,
) -> Result<f64, DivergenceError> {
    spec.validate()?;
    if teacher_logits.len() != student_logits.len() {
        return Err(DivergenceError::SupportMismatch {
            left: teacher_logits.len(),
            right: student_logits.len(),
        });
    }
    let scale = if spec.tau_sq_scaling {
        spec.tau * spec.tau
    } else {
        1.0
    };
    let mut total = 0.0;
    for (t, s) in teacher_logits.iter().zip(student_logits) {
        let p = temp_softmax(t, spec.tau)?;
        let q = temp_softmax(s, spec.tau)?;
        total += scale * divergence(spec.kind, &p, &q, spec.beta)?;
    }
    Ok(total)
}

/// The mixed objective alpha * ce + (1 - alpha) * kd, with its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Combines the supervised and distillation terms; `alpha` must lie in
/// [0, 1].
pub fn total_loss(ce: f64, kd: f64, alpha: f64) -> Result<LossBreakdown, DivergenceError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(DivergenceError::BadAlpha(alpha));
    }
    Ok(LossBreakdown {
        ce,
        kd,
        alpha,
        total: alpha * ce + (1.0 - alpha) * kd,
    })
}
