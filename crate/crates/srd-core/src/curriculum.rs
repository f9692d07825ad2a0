//! Staged curriculum construction and its cost accounting.
//!
//! The curated, easiest-first pair list is cut into `n_stages` contiguous
//! subsets. Stage `i` trains on the *cumulative* union of subsets `1..=i`,
//! so earlier (easier) pairs are revisited while harder ones phase in.
//! Each stage carries its own distillation temperature and mixing weight,
//! interpolated linearly between configured endpoints:
//!
//! ```text
//! tau_i   = tau0   + (tau_n - tau0)   * (i - 1) / (n - 1)
//! alpha_i = alpha0 - (alpha0 - alpha_n) * (i - 1) / (n - 1)
//! ```
//!
//! with stage `n` pinned to the exact endpoint (no float drift) and a
//! single-stage curriculum using the endpoint values directly. Temperature
//! rises (softer teacher targets as data hardens) while the ground-truth
//! weight falls.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stage count and schedule endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub n_stages: usize,
    /// Distillation temperature at stage 1.
    pub tau0: f64,
    /// Distillation temperature at the final stage.
    pub tau_n: f64,
    /// Ground-truth mixing weight at stage 1.
    pub alpha0: f64,
    /// Ground-truth mixing weight at the final stage.
    pub alpha_n: f64,
    /// Training epochs per stage.
    pub epochs_per_stage: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            n_stages: 3,
            tau0: 1.0,
            tau_n: 2.0,
            alpha0: 0.3,
            alpha_n: 0.1,
            epochs_per_stage: 8,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        if self.n_stages == 0 {
            return Err(CurriculumError::BadStages(self.n_stages));
        }
        if self.epochs_per_stage == 0 {
            return Err(CurriculumError::BadEpochs);
        }
        for tau in [self.tau0, self.tau_n] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(CurriculumError::BadTau(tau));
            }
        }
        for alpha in [self.alpha0, self.alpha_n] {
            if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
                return Err(CurriculumError::BadAlpha(alpha));
            }
        }
        Ok(())
    }
}

/// Whether stages run over the curated list as-is (easiest first) or
/// reversed (ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumOrder {
    EasyToHard,
    HardToEasy,
}

impl FromStr for CurriculumOrder {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self, CurriculumError> {
        match s {
            "easy_to_hard" => Ok(CurriculumOrder::EasyToHard),
            "hard_to_easy" => Ok(CurriculumOrder::HardToEasy),
            other => Err(CurriculumError::UnknownOrder(other.to_string())),
        }
    }
}

impl fmt::Display for CurriculumOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurriculumOrder::EasyToHard => "easy_to_hard",
            CurriculumOrder::HardToEasy => "hard_to_easy",
        })
    }
}

/// One stage: its *new* pair ids plus the schedule values in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 1-based stage number.
    pub stage: usize,
    /// Pair ids introduced at this stage (training uses the cumulative
    /// union of all stages up to and including this one).
    pub ids: Vec<String>,
    pub tau: f64,
    pub alpha: f64,
    pub epochs: usize,
}

/// A fully resolved curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<StageSpec>,
    pub order: CurriculumOrder,
}

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("stage count must be at least 1, got {0}")]
    BadStages(usize),
    #[error("epochs per stage must be at least 1")]
    BadEpochs,
    #[error("temperature endpoints must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("mixing-weight endpoints must be in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("unknown curriculum order \"{0}\"")]
    UnknownOrder(String),
    #[error("cannot build a curriculum from an empty curated list")]
    EmptyCuration,
    #[error("{stages} stages need at least {stages} pairs, got {items}")]
    TooManyStages { stages: usize, items: usize },
    #[error("budget inputs must be positive")]
    BadBudgetInputs,
}

/// Splits `items` into `n` contiguous subsets whose sizes differ by at most
/// one, larger subsets first. Concatenating the result restores `items`.
pub fn partition<T: Clone>(items: &[T], n: usize) -> Result<Vec<Vec<T>>, CurriculumError> {
    if n == 0 {
        return Err(CurriculumError::BadStages(n));
    }
    if items.is_empty() {
        return Err(CurriculumError::EmptyCuration);
    }
    if n > items.len() {
        return Err(CurriculumError::TooManyStages {
            stages: n,
            items: items.len(),
        });
    }
    let base = items.len() / n;
    let remainder = items.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < remainder);
        out.push(items[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// Temperature for 1-based stage `i`; the final stage hits `tau_n` exactly.
pub fn tau_at(i: usize, cfg: &ScheduleConfig) -> f64 {
    schedule_value(i, cfg.n_stages, cfg.tau0, cfg.tau_n)
}

/// Mixing weight for 1-based stage `i`; the final stage hits `alpha_n`
/// exactly.
pub fn alpha_at(i: usize, cfg: &ScheduleConfig) -> f64 {
    schedule_value(i, cfg.n_stages, cfg.alpha0, cfg.alpha_n)
}

fn schedule_value(i: usize, n: usize, start: f64, end: f64) -> f64 {
    debug_assert!((1..=n).contains(&i), "stage {i} outside 1..={n}");
    if i == n {
        return end;
    }
    start + (end - start) * (i - 1) as f64 / (n - 1) as f64
}

/// Builds the staged plan from a curated, easiest-first id list.
pub fn build_plan(
    curated: &[String],
    cfg: &ScheduleConfig,
    order: CurriculumOrder,
) -> Result<CurriculumPlan, CurriculumError> {
    cfg.validate()?;
    let mut ordered: Vec<String> = curated.to_vec();
    if order == CurriculumOrder::HardToEasy {
        ordered.reverse();
    }
    let subsets = partition(&ordered, cfg.n_stages)?;
    let stages = subsets
        .into_iter()
        .enumerate()
        .map(|(idx, ids)| {
            let stage = idx + 1;
            StageSpec {
                stage,
                ids,
                tau: tau_at(stage, cfg),
                alpha: alpha_at(stage, cfg),
                epochs: cfg.epochs_per_stage,
            }
        })
        .collect();
    Ok(CurriculumPlan { stages, order })
}

/// Pair ids trained during stage `upto` (1-based): the union of all
/// subsets introduced so far, in plan order.
pub fn cumulative_ids(plan: &CurriculumPlan, upto: usize) -> Vec<String> {
    plan.stages
        .iter()
        .take(upto)
        .flat_map(|s| s.ids.iter().cloned())
        .collect()
}

/// Fraction of baseline optimizer steps the staged plan consumes:
/// `sum_i epochs_i * |cumulative_i| / (baseline_epochs * full_n)`.
/// The numerator is summed in integers, so divisible configurations give
/// exact fractions.
pub fn step_budget(
    plan: &CurriculumPlan,
    baseline_epochs: usize,
    full_n: usize,
) -> Result<f64, CurriculumError> {
    if baseline_epochs == 0 || full_n == 0 {
        return Err(CurriculumError::BadBudgetInputs);
    }
    let mut cumulative = 0usize;
    let mut numerator = 0usize;
    for stage in &plan.stages {
        cumulative += stage.ids.len();
        numerator += stage.epochs * cumulative;
    }
    Ok(numerator as f64 / (baseline_epochs * full_n) as f64)
}

/// Fraction of baseline wall-clock saved by reflecting then training under
/// `budget_fraction` of the baseline steps:
/// `1 - (reflection_seconds + budget_fraction * baseline_seconds) / baseline_seconds`.
/// Negative when reflection costs more than the training it avoids.
pub fn cost_model(
    reflection_seconds: f64,
    baseline_seconds: f64,
    budget_fraction: f64,
) -> Result<f64, CurriculumError> {
    if !(baseline_seconds > 0.0)
        || !(reflection_seconds >= 0.0)
        || !(budget_fraction >= 0.0)
        || !baseline_seconds.is_finite()
        || !reflection_seconds.is_finite()
        || !budget_fraction.is_finite()
    {
        return Err(CurriculumError::BadBudgetInputs);
    }
    Ok(1.0 - (reflection_seconds + budget_fraction * baseline_seconds) / baseline_seconds)
}
