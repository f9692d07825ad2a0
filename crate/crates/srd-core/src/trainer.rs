//! End-to-end distillation runs.
//!
//! A run wires the pipeline together: initialize the student, let it score
//! the training pairs ([`crate::reflect`]), build the staged curriculum
//! ([`crate::curriculum`]), then distill from a trained teacher under the
//! per-stage temperature and mixing-weight schedules. Baseline modes skip
//! reflection and curriculum and train on everything at the stage-1
//! settings for a fixed epoch count; on-policy modes replace a seeded
//! fraction of reference responses with the student's own sampled outputs,
//! re-decoded as the student improves.
//!
//! Determinism: every random choice (init, shuffles, on-policy coins and
//! decodes) draws from a stream derived from the run seed via
//! [`crate::seeding::derive_seed`], and stages always visit their pair ids
//! in sorted order before the seeded shuffle. Two runs with equal
//! configuration and seed produce bit-identical students; a one-stage,
//! keep-everything, flat-schedule curriculum run is bit-identical to the
//! plain baseline.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Splits, TokenId};
use crate::curriculum::{
    build_plan, cumulative_ids, step_budget, CurriculumError, CurriculumOrder, CurriculumPlan,
    ScheduleConfig,
};
use crate::divergence::{DivergenceKind, DivergenceSpec};
use crate::metrics::rouge_l;
use crate::reflect::{
    run_reflection, CurationConfig, Ranking, ReflectError, ReflectionOutcome,
};
use crate::seeding::{derive_seed, STREAM_ON_POLICY, STREAM_SHUFFLE, STREAM_STUDENT_INIT};
use crate::tinylm::{
    forcing_atoms, greedy_decode, loss_and_grad, sample_decode, sequence_ce, BatchItem,
    LmConfig, ModelError, Optimizer, TinyLm,
};

/// Which pipeline variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Reflection, curation, staged curriculum, reference responses.
    Srd,
    /// Everything, no curriculum, reference responses.
    BaselineOffpolicy,
    /// Everything, no curriculum, a seeded fraction of responses sampled
    /// from the current student.
    BaselineOnpolicy,
    /// Full pipeline plus the on-policy response mix.
    SrdOnpolicy,
}

impl RunMode {
    /// True for the modes that reflect and train on a staged curriculum.
    pub fn uses_curriculum(self) -> bool {
        matches!(self, RunMode::Srd | RunMode::SrdOnpolicy)
    }

    /// True for the modes that mix student-sampled responses into training.
    pub fn on_policy(self) -> bool {
        matches!(self, RunMode::BaselineOnpolicy | RunMode::SrdOnpolicy)
    }
}

impl FromStr for RunMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "srd" => Ok(RunMode::Srd),
            "baseline_offpolicy" => Ok(RunMode::BaselineOffpolicy),
            "baseline_onpolicy" => Ok(RunMode::BaselineOnpolicy),
            "srd_onpolicy" => Ok(RunMode::SrdOnpolicy),
            other => Err(TrainError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Srd => "srd",
            RunMode::BaselineOffpolicy => "baseline_offpolicy",
            RunMode::BaselineOnpolicy => "baseline_onpolicy",
            RunMode::SrdOnpolicy => "srd_onpolicy",
        })
    }
}

/// Everything a run needs besides the data and the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub order: CurriculumOrder,
    pub curation: CurationConfig,
    pub schedule: ScheduleConfig,
    pub divergence: DivergenceSpec,
    /// Probability that an on-policy mode replaces a reference response
    /// with a student sample.
    pub sgo_mix: f64,
    /// Decode cap for on-policy student samples.
    pub sample_max_len: usize,
    /// Decode cap for ROUGE evaluation.
    pub eval_max_len: usize,
    pub seed: u64,
    /// Pairs per optimizer step (each pair contributes all its prediction
    /// atoms).
    pub batch_size: usize,
    /// Epochs a non-curriculum baseline trains for; also the denominator
    /// of the step-budget fraction.
    pub baseline_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Per-stage early stop: stop a stage after this many epochs without
    /// validation improvement (0 disables).
    pub patience: usize,
    /// Memoize teacher logits by context window across epochs.
    pub cache_teacher_logits: bool,
    pub student: LmConfig,
}

impl RunConfig {
    /// A config with the documented defaults for everything but mode and
    /// student architecture.
    pub fn new(mode: RunMode, student: LmConfig) -> Self {
        RunConfig {
            mode,
            order: CurriculumOrder::EasyToHard,
            curation: CurationConfig::default(),
            schedule: ScheduleConfig::default(),
            divergence: DivergenceSpec::default(),
            sgo_mix: 0.5,
            sample_max_len: 16,
            eval_max_len: 16,
            seed: 0,
            batch_size: 16,
            baseline_epochs: 20,
            learning_rate: 0.1,
            momentum: 0.9,
            patience: 0,
            cache_teacher_logits: false,
            student,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.curation.validate()?;
        self.schedule.validate()?;
        self.divergence.validate().map_err(ModelError::from)?;
        self.student.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::BadBatchSize);
        }
        if self.baseline_epochs == 0 {
            return Err(TrainError::BadBaselineEpochs);
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadMomentum(self.momentum));
        }
        if !(0.0..=1.0).contains(&self.sgo_mix) || !self.sgo_mix.is_finite() {
            return Err(TrainError::BadMix(self.sgo_mix));
        }
        if self.sample_max_len == 0 || self.eval_max_len == 0 {
            return Err(TrainError::BadDecodeLen);
        }
        Ok(())
    }
}

/// Architecture and optimization settings for plain supervised training:
/// pre-training a teacher, or warm-starting a student before distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lm: LmConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reflect(#[from] ReflectError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error("unknown run mode \"{0}\"")]
    UnknownMode(String),
    #[error("{which} split is empty")]
    EmptySplit { which: &'static str },
    #[error("teacher vocab has {teacher} entries but dataset vocab has {data}")]
    TeacherVocabMismatch { teacher: usize, data: usize },
    #[error("student vocab has {student} entries but dataset vocab has {data}")]
    StudentVocabMismatch { student: usize, data: usize },
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("baseline epochs must be at least 1")]
    BadBaselineEpochs,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("momentum must be in [0, 1), got {0}")]
    BadMomentum(f64),
    #[error("on-policy mix must be in [0, 1], got {0}")]
    BadMix(f64),
    #[error("decode lengths must be at least 1")]
    BadDecodeLen,
    #[error("stage references unknown pair id \"{0}\"")]
    UnknownPairId(String),
    #[error("warm-start student shape {found:?} does not match configured {expected:?}")]
    WarmStartMismatch { expected: LmConfig, found: LmConfig },
    #[error("failed writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One epoch of one stage, as logged to the epoch CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    /// Atom-weighted mean cross-entropy over the epoch's batches.
    pub train_ce: f64,
    /// Atom-weighted mean (scaled) divergence over the epoch's batches.
    pub train_kd: f64,
    /// Teacher-forced cross-entropy on the validation split.
    pub valid_ce: f64,
    pub tau: f64,
    pub alpha: f64,
    /// Pair visits so far, summed over all epochs run.
    pub cumulative_visits: usize,
}

/// Teacher-forced cross-entropy plus greedy-decode ROUGE on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Token-weighted mean cross-entropy in nats (end token included).
    pub mean_ce: f64,
    /// Mean ROUGE-L F1 of greedy decodes against references.
    pub mean_rouge_f: f64,
}

/// Everything measured about a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mode: RunMode,
    pub order: CurriculumOrder,
    pub ranking: Ranking,
    pub divergence: DivergenceKind,
    pub beta: f64,
    pub tau_sq_scaling: bool,
    /// Temperature in force at each stage, in order.
    pub stage_taus: Vec<f64>,
    /// Mixing weight in force at each stage, in order.
    pub stage_alphas: Vec<f64>,
    /// Pairs that survived curation (= train size for baselines).
    pub kept: usize,
    /// Pairs in the training split.
    pub total_train_pairs: usize,
    pub epochs: Vec<EpochRecord>,
    /// Optimizer-step fraction relative to the baseline (1.0 for
    /// baselines by definition).
    pub budget_fraction: f64,
    pub final_valid: EvalMetrics,
    pub final_test: EvalMetrics,
    /// Measured wall-clock: reflection phase (0 for baselines).
    pub reflection_seconds: f64,
    /// Measured wall-clock: training phase.
    pub training_seconds: f64,
}

/// A finished run: the trained student plus everything logged on the way.
#[derive(Debug)]
pub struct RunOutput {
    pub student: TinyLm,
    pub report: TrainingReport,
    /// Present for the curriculum modes.
    pub reflection: Option<ReflectionOutcome>,
    /// Present for the curriculum modes.
    pub plan: Option<CurriculumPlan>,
}

/// Per-stage early stopping on validation cross-entropy.
#[derive(Debug)]
struct PatienceTracker {
    patience: usize,
    best: f64,
    stale: usize,
}

impl PatienceTracker {
    fn new(patience: usize) -> Self {
        PatienceTracker {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's validation CE; true means "stop the stage".
    fn should_stop(&mut self, valid_ce: f64) -> bool {
        if valid_ce < self.best {
            self.best = valid_ce;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        self.patience > 0 && self.stale >= self.patience
    }
}

/// A resolved stage as the engine runs it: cumulative ids, sorted.
struct EngineStage {
    stage: usize,
    pair_indices: Vec<usize>,
    tau: f64,
    alpha: f64,
    epochs: usize,
}

struct EngineSettings<'a> {
    teacher: Option<&'a TinyLm>,
    divergence: DivergenceSpec,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    seed: u64,
    on_policy: Option<OnPolicySettings>,
    patience: usize,
    cache_teacher_logits: bool,
}

#[derive(Clone, Copy)]
struct OnPolicySettings {
    mix: f64,
    max_len: usize,
}

/// Resolves stage id lists against the training split, sorting each
/// cumulative set so the visit order is canonical regardless of how the
/// ids were produced.
fn resolve_stages(
    train: &Dataset,
    stages: &[(usize, Vec<String>, f64, f64, usize)],
) -> Result<Vec<EngineStage>, TrainError> {
    let index_of: HashMap<&str, usize> = train
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    stages
        .iter()
        .map(|(stage, ids, tau, alpha, epochs)| {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            let pair_indices = sorted
                .iter()
                .map(|id| {
                    index_of
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| TrainError::UnknownPairId(id.clone()))
                })
                .collect::<Result<Vec<usize>, TrainError>>()?;
            Ok(EngineStage {
                stage: *stage,
                pair_indices,
                tau: *tau,
                alpha: *alpha,
                epochs: *epochs,
            })
        })
        .collect()
}

/// Teacher logits for a batch of atom contexts, optionally memoized.
fn teacher_logits_for(
    teacher: &TinyLm,
    contexts: &[Vec<TokenId>],
    cache: &mut Option<HashMap<Vec<TokenId>, Vec<f64>>>,
) -> Result<Vec<Vec<f64>>, TrainError> {
    match cache {
        None => {
            let views: Vec<&[TokenId]> = contexts.iter().map(Vec::as_slice).collect();
            Ok(teacher.forward_many(&views)?)
        }
        Some(map) => {
            let missing: Vec<&[TokenId]> = contexts
                .iter()
                .filter(|c| !map.contains_key(c.as_slice()))
                .map(|c| c.as_slice())
                .collect();
            if !missing.is_empty() {
                let fresh = teacher.forward_many(&missing)?;
                for (ctx, logits) in missing.iter().zip(fresh) {
                    map.insert(ctx.to_vec(), logits);
                }
            }
            Ok(contexts
                .iter()
                .map(|c| map[c.as_slice()].clone())
                .collect())
        }
    }
}

/// Trains `student` in place over the resolved stages, logging one record
/// per epoch. The optimizer's momentum carries across stage boundaries.
fn run_stages(
    student: &mut TinyLm,
    train: &Dataset,
    valid: &Dataset,
    stages: &[EngineStage],
    settings: &EngineSettings,
) -> Result<Vec<EpochRecord>, TrainError> {
    let mut optimizer = Optimizer::new(
        &student.config,
        settings.learning_rate,
        settings.momentum,
    );
    let mut cache = settings.cache_teacher_logits.then(HashMap::new);
    let mut records = Vec::new();
    let mut cumulative_visits = 0usize;
    for stage in stages {
        let mut patience = PatienceTracker::new(settings.patience);
        for epoch in 1..=stage.epochs {
            let shuffle_seed = derive_seed(
                settings.seed,
                &[STREAM_SHUFFLE, stage.stage as u64, epoch as u64],
            );
            let mut order = stage.pair_indices.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let mut policy_rng = settings.on_policy.map(|_| {
                ChaCha8Rng::seed_from_u64(derive_seed(
                    settings.seed,
                    &[STREAM_ON_POLICY, stage.stage as u64, epoch as u64],
                ))
            });

            let mut ce_weighted = 0.0;
            let mut kd_weighted = 0.0;
            let mut atom_count = 0usize;
            for chunk in order.chunks(settings.batch_size) {
                let mut batch = Vec::new();
                for &pair_idx in chunk {
                    let pair = &train.pairs[pair_idx];
                    let sampled = match (&settings.on_policy, &mut policy_rng) {
                        (Some(op), Some(rng)) => {
                            let coin: f64 = rng.gen();
                            (coin < op.mix).then(|| (op.max_len, rng.gen::<u64>()))
                        }
                        _ => None,
                    };
                    let response = match sampled {
                        Some((max_len, decode_seed)) => {
                            sample_decode(student, &pair.prompt, max_len, 1.0, decode_seed)?
                        }
                        None => pair.response.clone(),
                    };
                    for (context, target) in
                        forcing_atoms(&pair.prompt, &response, student.config.context, true)
                    {
                        batch.push(BatchItem {
                            context,
                            target,
                            teacher_logits: None,
                        });
                    }
                }
                if stage.alpha < 1.0 {
                    let teacher = settings
                        .teacher
                        .expect("validated: teacher present when alpha < 1");
                    let contexts: Vec<Vec<TokenId>> =
                        batch.iter().map(|item| item.context.clone()).collect();
                    let logits = teacher_logits_for(teacher, &contexts, &mut cache)?;
                    for (item, l) in batch.iter_mut().zip(logits) {
                        item.teacher_logits = Some(l);
                    }
                }
                let spec = settings.divergence.at_tau(stage.tau);
                let loss = loss_and_grad(student, &batch, stage.alpha, &spec)?;
                optimizer.step(student, &loss.grads);
                let weight = batch.len() as f64;
                ce_weighted += loss.breakdown.ce * weight;
                kd_weighted += loss.breakdown.kd * weight;
                atom_count += batch.len();
            }

            cumulative_visits += order.len();
            let valid_ce = teacher_forced_ce(student, valid)?;
            records.push(EpochRecord {
                stage: stage.stage,
                epoch,
                train_ce: ce_weighted / atom_count as f64,
                train_kd: kd_weighted / atom_count as f64,
                valid_ce,
                tau: stage.tau,
                alpha: stage.alpha,
                cumulative_visits,
            });
            if patience.should_stop(valid_ce) {
                break;
            }
        }
    }
    Ok(records)
}

/// Token-weighted teacher-forced cross-entropy over a whole split.
fn teacher_forced_ce(model: &TinyLm, data: &Dataset) -> Result<f64, TrainError> {
    let per_pair: Vec<(f64, usize)> = data
        .pairs
        .par_iter()
        .map(|pair| {
            sequence_ce(model, &pair.prompt, &pair.response, true)
                .map(|ce| (ce.total_nats, ce.token_count))
        })
        .collect::<Result<_, ModelError>>()?;
    let (nats, tokens) = per_pair
        .into_iter()
        .fold((0.0, 0usize), |(a, b), (n, t)| (a + n, b + t));
    Ok(nats / tokens.max(1) as f64)
}

/// Cross-entropy and greedy-decode ROUGE for one split.
pub fn evaluate(
    model: &TinyLm,
    data: &Dataset,
    decode_max_len: usize,
) -> Result<EvalMetrics, TrainError> {
    if data.pairs.is_empty() {
        return Err(TrainError::EmptySplit { which: "evaluated" });
    }
    if data.vocab.len() != model.config.vocab_size {
        return Err(TrainError::StudentVocabMismatch {
            student: model.config.vocab_size,
            data: data.vocab.len(),
        });
    }
    let mean_ce = teacher_forced_ce(model, data)?;
    let rouge_sum: f64 = data
        .pairs
        .par_iter()
        .map(|pair| {
            greedy_decode(model, &pair.prompt, decode_max_len)
                .map(|out| rouge_l(&pair.response, &out).f1)
        })
        .collect::<Result<Vec<f64>, ModelError>>()?
        .into_iter()
        .sum();
    Ok(EvalMetrics {
        mean_ce,
        mean_rouge_f: rouge_sum / data.pairs.len() as f64,
    })
}

/// Trains a model on the references alone (pure cross-entropy): the way a
/// teacher is pre-trained, and the way a student is warmed before
/// distillation.
pub fn train_supervised(
    train: &Dataset,
    cfg: &SftConfig,
    seed: u64,
) -> Result<TinyLm, TrainError> {
    if train.pairs.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if train.vocab.len() != cfg.lm.vocab_size {
        return Err(TrainError::StudentVocabMismatch {
            student: cfg.lm.vocab_size,
            data: train.vocab.len(),
        });
    }
    let mut teacher = TinyLm::init(cfg.lm, derive_seed(seed, &[STREAM_STUDENT_INIT]));
    let all_ids: Vec<String> = train.pairs.iter().map(|p| p.id.clone()).collect();
    let stages = resolve_stages(
        train,
        &[(1, all_ids, 1.0, 1.0, cfg.epochs)],
    )?;
    let settings = EngineSettings {
        teacher: None,
        divergence: DivergenceSpec::default(),
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        seed,
        on_policy: None,
        patience: 0,
        cache_teacher_logits: false,
    };
    // Validation CE is logged against the training split here; teacher
    // pre-training has no early stop, so it only feeds the records.
    run_stages(&mut teacher, train, train, &stages, &settings)?;
    Ok(teacher)
}

/// Runs the configured pipeline end to end.
///
/// The teacher must share the dataset vocabulary (and, in this
/// implementation, the student's vocabulary size — both are checked).
pub fn run(
    teacher: &TinyLm,
    splits: &Splits,
    cfg: &RunConfig,
) -> Result<RunOutput, TrainError> {
    run_with_init(teacher, splits, cfg, None)
}

/// Like [`run`], but starting from an existing student instead of a fresh
/// random initialization.
///
/// Difficulty scoring reflects whatever competence the starting student
/// has, so callers that pre-train the student (the usual regime: the
/// student arrives already fine-tuned) should pass it here rather than
/// re-initializing.
pub fn run_with_init(
    teacher: &TinyLm,
    splits: &Splits,
    cfg: &RunConfig,
    warm_start: Option<&TinyLm>,
) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    for (which, data) in [
        ("train", &splits.train),
        ("valid", &splits.valid),
        ("test", &splits.test),
    ] {
        if data.pairs.is_empty() {
            return Err(TrainError::EmptySplit { which });
        }
    }
    let vocab_len = splits.train.vocab.len();
    if teacher.config.vocab_size != vocab_len {
        return Err(TrainError::TeacherVocabMismatch {
            teacher: teacher.config.vocab_size,
            data: vocab_len,
        });
    }
    if cfg.student.vocab_size != vocab_len {
        return Err(TrainError::StudentVocabMismatch {
            student: cfg.student.vocab_size,
            data: vocab_len,
        });
    }
    if let Some(init) = warm_start {
        if init.config != cfg.student {
            return Err(TrainError::WarmStartMismatch {
                expected: cfg.student,
                found: init.config,
            });
        }
    }

    let mut student = match warm_start {
        Some(init) => init.clone(),
        None => TinyLm::init(
            cfg.student,
            derive_seed(cfg.seed, &[STREAM_STUDENT_INIT]),
        ),
    };

    // Reflection and curriculum phases (curriculum modes only).
    let mut reflection = None;
    let mut plan = None;
    let mut reflection_seconds = 0.0;
    let stage_tuples: Vec<(usize, Vec<String>, f64, f64, usize)> = if cfg.mode.uses_curriculum() {
        let reflect_started = Instant::now();
        let outcome = run_reflection(&student, &splits.train, &cfg.curation)?;
        reflection_seconds = reflect_started.elapsed().as_secs_f64();
        let built = build_plan(&outcome.curated, &cfg.schedule, cfg.order)?;
        let tuples = built
            .stages
            .iter()
            .map(|s| {
                (
                    s.stage,
                    cumulative_ids(&built, s.stage),
                    s.tau,
                    s.alpha,
                    s.epochs,
                )
            })
            .collect();
        reflection = Some(outcome);
        plan = Some(built);
        tuples
    } else {
        let all_ids: Vec<String> = splits.train.pairs.iter().map(|p| p.id.clone()).collect();
        vec![(
            1,
            all_ids,
            cfg.schedule.tau0,
            cfg.schedule.alpha0,
            cfg.baseline_epochs,
        )]
    };
    let stages = resolve_stages(&splits.train, &stage_tuples)?;
    let budget_fraction = match &plan {
        Some(p) => step_budget(p, cfg.baseline_epochs, splits.train.len())?,
        None => 1.0,
    };
    let kept = stages.last().map_or(0, |s| s.pair_indices.len());

    let settings = EngineSettings {
        teacher: Some(teacher),
        divergence: cfg.divergence,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        seed: cfg.seed,
        on_policy: cfg.mode.on_policy().then(|| OnPolicySettings {
            mix: cfg.sgo_mix,
            max_len: cfg.sample_max_len,
        }),
        patience: cfg.patience,
        cache_teacher_logits: cfg.cache_teacher_logits,
    };
    let train_started = Instant::now();
    let epochs = run_stages(&mut student, &splits.train, &splits.valid, &stages, &settings)?;
    let training_seconds = train_started.elapsed().as_secs_f64();

    let report = TrainingReport {
        mode: cfg.mode,
        order: cfg.order,
        ranking: cfg.curation.ranking,
        divergence: cfg.divergence.kind,
        beta: cfg.divergence.beta,
        tau_sq_scaling: cfg.divergence.tau_sq_scaling,
        stage_taus: stages.iter().map(|s| s.tau).collect(),
        stage_alphas: stages.iter().map(|s| s.alpha).collect(),
        kept,
        total_train_pairs: splits.train.len(),
        epochs,
        budget_fraction,
        final_valid: evaluate(&student, &splits.valid, cfg.eval_max_len)?,
        final_test: evaluate(&student, &splits.test, cfg.eval_max_len)?,
        reflection_seconds,
        training_seconds,
    };
    Ok(RunOutput {
        student,
        report,
        reflection,
        plan,
    })
}

/// Writes the per-epoch log as CSV. Wall-clock never enters this file, so
/// equal runs produce byte-identical output.
pub fn write_epoch_csv(
    path: impl AsRef<Path>,
    records: &[EpochRecord],
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut out = String::from("stage,epoch,train_ce,train_kd,valid_ce,tau,alpha,cumulative_visits\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.stage, r.epoch, r.train_ce, r.train_kd, r.valid_ce, r.tau, r.alpha,
            r.cumulative_visits
        ));
    }
    std::fs::write(path, out).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_vocab, generate_synthetic, split, tokenize_records, SyntheticSpec,
    };
    use crate::seeding::STREAM_TEACHER;
    use approx::assert_relative_eq;

    fn tiny_splits(count: usize, seed: u64) -> Splits {
        let records = generate_synthetic(&SyntheticSpec::default(), count, seed);
        let vocab = build_vocab(&records, 1);
        let (data, _) = tokenize_records(&records, vocab, 32);
        split(data, (0.6, 0.2, 0.2), 0).unwrap()
    }

    fn tiny_lm(vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            context: 8,
            embed_dim: 4,
            hidden_dim: 6,
        }
    }

    fn quick_config(mode: RunMode, splits: &Splits) -> RunConfig {
        let mut cfg = RunConfig::new(mode, tiny_lm(splits.train.vocab.len()));
        cfg.schedule.epochs_per_stage = 2;
        cfg.baseline_epochs = 4;
        cfg.batch_size = 8;
        cfg.seed = 5;
        cfg
    }

    fn quick_teacher(splits: &Splits, seed: u64) -> TinyLm {
        train_supervised(
            &splits.train,
            &SftConfig {
                lm: tiny_lm(splits.train.vocab.len()),
                epochs: 3,
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 8,
            },
            derive_seed(seed, &[STREAM_TEACHER]),
        )
        .unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [
            RunMode::Srd,
            RunMode::BaselineOffpolicy,
            RunMode::BaselineOnpolicy,
            RunMode::SrdOnpolicy,
        ] {
            assert_eq!(mode.to_string().parse::<RunMode>().unwrap(), mode);
        }
        assert!("sft".parse::<RunMode>().is_err());
        assert!(RunMode::SrdOnpolicy.uses_curriculum());
        assert!(RunMode::SrdOnpolicy.on_policy());
        assert!(!RunMode::BaselineOffpolicy.on_policy());
    }

    #[test]
    fn config_validation_flags_bad_fields() {
        let lm = tiny_lm(10);
        let mut cfg = RunConfig::new(RunMode::Srd, lm);
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(TrainError::BadBatchSize)));
        cfg = RunConfig::new(RunMode::Srd, lm);
        cfg.learning_rate = 0.0;
        assert!(matches!(cfg.validate(), Err(TrainError::BadLearningRate(_))));
        cfg = RunConfig::new(RunMode::Srd, lm);
        cfg.momentum = 1.0;
        assert!(matches!(cfg.validate(), Err(TrainError::BadMomentum(_))));
        cfg = RunConfig::new(RunMode::Srd, lm);
        cfg.sgo_mix = 1.5;
        assert!(matches!(cfg.validate(), Err(TrainError::BadMix(_))));
        cfg = RunConfig::new(RunMode::Srd, lm);
        cfg.curation.lambda = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patience_tracker_stops_after_stale_epochs() {
        let mut t = PatienceTracker::new(2);
        assert!(!t.should_stop(1.0));
        assert!(!t.should_stop(0.9)); // improvement resets
        assert!(!t.should_stop(0.95)); // stale 1
        assert!(t.should_stop(0.93)); // stale 2 -> stop
        let mut off = PatienceTracker::new(0);
        for _ in 0..10 {
            assert!(!off.should_stop(2.0));
        }
    }

    #[test]
    fn teacher_training_is_deterministic_and_learns() {
        let splits = tiny_splits(40, 1);
        let a = quick_teacher(&splits, 3);
        let b = quick_teacher(&splits, 3);
        assert_eq!(a, b);
        let c = quick_teacher(&splits, 4);
        assert_ne!(a, c);
        let init = TinyLm::init(
            tiny_lm(splits.train.vocab.len()),
            derive_seed(derive_seed(3, &[STREAM_TEACHER]), &[STREAM_STUDENT_INIT]),
        );
        let before = evaluate(&init, &splits.train, 8).unwrap();
        let after = evaluate(&a, &splits.train, 8).unwrap();
        assert!(
            after.mean_ce < before.mean_ce,
            "teacher CE {} should beat init CE {}",
            after.mean_ce,
            before.mean_ce
        );
    }

    #[test]
    fn uniform_model_evaluates_at_ln_v() {
        let splits = tiny_splits(20, 2);
        let v = splits.valid.vocab.len();
        let model = TinyLm::zeros(tiny_lm(v));
        let metrics = evaluate(&model, &splits.valid, 8).unwrap();
        assert_relative_eq!(metrics.mean_ce, (v as f64).ln(), epsilon = 1e-9);
        assert!(metrics.mean_rouge_f >= 0.0);
    }

    #[test]
    fn srd_run_is_deterministic_and_reports_budget() {
        let splits = tiny_splits(40, 3);
        let teacher = quick_teacher(&splits, 7);
        let cfg = quick_config(RunMode::Srd, &splits);
        let a = run(&teacher, &splits, &cfg).unwrap();
        let b = run(&teacher, &splits, &cfg).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.report.epochs, b.report.epochs);
        assert!(a.plan.is_some());
        assert!(a.reflection.is_some());
        assert_eq!(a.report.stage_taus, vec![1.0, 1.5, 2.0]);
        assert_eq!(a.report.stage_alphas, vec![0.3, 0.2, 0.1]);
        assert_eq!(a.report.epochs.len(), 6); // 3 stages x 2 epochs
        assert!(a.report.budget_fraction > 0.0 && a.report.budget_fraction < 1.0);
        assert_eq!(
            a.report.kept,
            a.reflection.as_ref().unwrap().curated.len()
        );

        let mut other = cfg.clone();
        other.seed = 99;
        let c = run(&teacher, &splits, &other).unwrap();
        assert_ne!(a.student, c.student);
    }

    #[test]
    fn flat_single_stage_curriculum_equals_baseline_bitwise() {
        let splits = tiny_splits(30, 4);
        let teacher = quick_teacher(&splits, 11);
        let mut srd = quick_config(RunMode::Srd, &splits);
        srd.curation.lambda = 1.0;
        srd.schedule.n_stages = 1;
        srd.schedule.tau_n = srd.schedule.tau0;
        srd.schedule.alpha_n = srd.schedule.alpha0;
        srd.schedule.epochs_per_stage = srd.baseline_epochs;
        let baseline = quick_config(RunMode::BaselineOffpolicy, &splits);
        let a = run(&teacher, &splits, &srd).unwrap();
        let b = run(&teacher, &splits, &baseline).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.report.epochs, b.report.epochs);
        assert_eq!(a.report.budget_fraction, 1.0);
    }

    #[test]
    fn zero_mix_on_policy_equals_off_policy_bitwise() {
        let splits = tiny_splits(30, 5);
        let teacher = quick_teacher(&splits, 13);
        let mut on = quick_config(RunMode::BaselineOnpolicy, &splits);
        on.sgo_mix = 0.0;
        let off = quick_config(RunMode::BaselineOffpolicy, &splits);
        let a = run(&teacher, &splits, &on).unwrap();
        let b = run(&teacher, &splits, &off).unwrap();
        assert_eq!(a.student, b.student);
    }

    #[test]
    fn on_policy_mixing_changes_training_deterministically() {
        let splits = tiny_splits(30, 6);
        let teacher = quick_teacher(&splits, 17);
        let cfg = quick_config(RunMode::SrdOnpolicy, &splits);
        let a = run(&teacher, &splits, &cfg).unwrap();
        let b = run(&teacher, &splits, &cfg).unwrap();
        assert_eq!(a.student, b.student);
        let off = quick_config(RunMode::Srd, &splits);
        let c = run(&teacher, &splits, &off).unwrap();
        assert_ne!(a.student, c.student);
    }

    #[test]
    fn cached_teacher_logits_do_not_change_results() {
        let splits = tiny_splits(30, 7);
        let teacher = quick_teacher(&splits, 19);
        let plain = quick_config(RunMode::Srd, &splits);
        let mut cached = plain.clone();
        cached.cache_teacher_logits = true;
        let a = run(&teacher, &splits, &plain).unwrap();
        let b = run(&teacher, &splits, &cached).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.report.epochs, b.report.epochs);
    }

    #[test]
    fn vocab_mismatches_are_rejected() {
        let splits = tiny_splits(30, 8);
        let v = splits.train.vocab.len();
        let teacher = TinyLm::zeros(tiny_lm(v + 1));
        let cfg = quick_config(RunMode::Srd, &splits);
        assert!(matches!(
            run(&teacher, &splits, &cfg),
            Err(TrainError::TeacherVocabMismatch { .. })
        ));
        let teacher = TinyLm::zeros(tiny_lm(v));
        let mut bad_student = cfg.clone();
        bad_student.student.vocab_size = v + 2;
        assert!(matches!(
            run(&teacher, &splits, &bad_student),
            Err(TrainError::StudentVocabMismatch { .. })
        ));
    }

    #[test]
    fn epoch_csv_is_byte_deterministic() {
        let splits = tiny_splits(30, 9);
        let teacher = quick_teacher(&splits, 23);
        let cfg = quick_config(RunMode::Srd, &splits);
        let out = run(&teacher, &splits, &cfg).unwrap();
        let f1 = tempfile::NamedTempFile::new().unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        write_epoch_csv(f1.path(), &out.report.epochs).unwrap();
        write_epoch_csv(f2.path(), &out.report.epochs).unwrap();
        let a = std::fs::read(f1.path()).unwrap();
        let b = std::fs::read(f2.path()).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "stage,epoch,train_ce,train_kd,valid_ce,tau,alpha,cumulative_visits"
        );
        assert_eq!(lines.count(), out.report.epochs.len());
    }

    #[test]
    fn distillation_improves_over_initialization() {
        let splits = tiny_splits(60, 10);
        let teacher = train_supervised(
            &splits.train,
            &SftConfig {
                lm: LmConfig {
                    vocab_size: splits.train.vocab.len(),
                    context: 8,
                    embed_dim: 8,
                    hidden_dim: 16,
                },
                epochs: 8,
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 8,
            },
            derive_seed(31, &[STREAM_TEACHER]),
        )
        .unwrap();
        let mut cfg = quick_config(RunMode::Srd, &splits);
        cfg.schedule.epochs_per_stage = 4;
        let out = run(&teacher, &splits, &cfg).unwrap();
        let init = TinyLm::init(cfg.student, derive_seed(cfg.seed, &[STREAM_STUDENT_INIT]));
        let before = evaluate(&init, &splits.valid, 16).unwrap();
        assert!(
            out.report.final_valid.mean_ce < before.mean_ce,
            "trained {} vs init {}",
            out.report.final_valid.mean_ce,
            before.mean_ce
        );
    }
}
