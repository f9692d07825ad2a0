//! Flat key=value run configuration.
//!
//! One `key = value` assignment per line. `#` starts a comment (whole-line
//! or trailing), blank lines are ignored, whitespace around keys and values
//! is trimmed, and a later assignment overrides an earlier one — so an
//! ablation config can be a copy of the base file with one extra line at
//! the bottom. Unknown keys are rejected by name, as are unparsable
//! values. Every key has a default except `mode` (which `train` and
//! `sweep` require, from the file or the `--mode` flag) and `data` (which
//! they also require).
//!
//! ## Keys
//!
//! Run control: `mode`, `order`, `seed`, `batch_size`, `baseline_epochs`,
//! `learning_rate`, `momentum`, `patience`, `cache_teacher_logits`,
//! `sgo_mix`, `sample_max_len`, `eval_max_len`.
//!
//! Curation: `lambda`, `rrf_k`, `ce_source`, `ranking`, `decode_strategy`
//! (`greedy` | `sample`), `decode_temperature`, `decode_seed`,
//! `decode_max_len`.
//!
//! Schedule: `n_stages`, `tau0`, `tau_n`, `alpha0`, `alpha_n`,
//! `epochs_per_stage`.
//!
//! Divergence: `divergence`, `beta`, `tau_sq_scaling`.
//!
//! Student architecture: `embed_dim`, `hidden_dim`, `context`.
//!
//! Data: `data`, `max_len`, `split_train`, `split_valid`, `split_test`,
//! `split_seed`.
//!
//! Teacher: `teacher_checkpoint` (load instead of training), or
//! `teacher_embed_dim`, `teacher_hidden_dim`, `teacher_epochs`,
//! `teacher_learning_rate`, `teacher_momentum`, `teacher_batch_size`,
//! `teacher_seed`.
//!
//! Warm start: `init_student` (checkpoint whose weights seed the student
//! instead of a fresh random init).

use std::collections::BTreeMap;
use std::str::FromStr;

use srd_core::curriculum::CurriculumOrder;
use srd_core::divergence::DivergenceKind;
use srd_core::reflect::{CeSource, CurationConfig, DecodeConfig, DecodeStrategy, Ranking};
use srd_core::tinylm::LmConfig;
use srd_core::trainer::{RunConfig, RunMode, SftConfig};

use crate::{usage, CliError};

/// Everything a config file can say, with library defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub mode: Option<RunMode>,
    pub order: CurriculumOrder,
    pub seed: u64,
    pub batch_size: usize,
    pub baseline_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub patience: usize,
    pub cache_teacher_logits: bool,
    pub sgo_mix: f64,
    pub sample_max_len: usize,
    pub eval_max_len: usize,

    pub lambda: f64,
    pub rrf_k: f64,
    pub ce_source: CeSource,
    pub ranking: Ranking,
    pub decode_strategy: String,
    pub decode_temperature: f64,
    pub decode_seed: u64,
    pub decode_max_len: usize,

    pub n_stages: usize,
    pub tau0: f64,
    pub tau_n: f64,
    pub alpha0: f64,
    pub alpha_n: f64,
    pub epochs_per_stage: usize,

    pub divergence: DivergenceKind,
    pub beta: f64,
    pub tau_sq_scaling: bool,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context: usize,

    pub data: Option<String>,
    pub max_len: usize,
    pub split_train: f64,
    pub split_valid: f64,
    pub split_test: f64,
    pub split_seed: u64,

    pub teacher_checkpoint: Option<String>,
    pub teacher_embed_dim: usize,
    pub teacher_hidden_dim: usize,
    pub teacher_epochs: usize,
    pub teacher_learning_rate: f64,
    pub teacher_momentum: f64,
    pub teacher_batch_size: usize,
    pub teacher_seed: u64,

    pub init_student: Option<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        // Library defaults are the source of truth; a unit test pins the
        // mirror against RunConfig::new.
        let run = RunConfig::new(
            RunMode::Srd,
            LmConfig {
                vocab_size: 4,
                context: 8,
                embed_dim: 8,
                hidden_dim: 16,
            },
        );
        CliConfig {
            mode: None,
            order: run.order,
            seed: run.seed,
            batch_size: run.batch_size,
            baseline_epochs: run.baseline_epochs,
            learning_rate: run.learning_rate,
            momentum: run.momentum,
            patience: run.patience,
            cache_teacher_logits: run.cache_teacher_logits,
            sgo_mix: run.sgo_mix,
            sample_max_len: run.sample_max_len,
            eval_max_len: run.eval_max_len,
            lambda: run.curation.lambda,
            rrf_k: run.curation.rrf_k,
            ce_source: run.curation.ce_source,
            ranking: run.curation.ranking,
            decode_strategy: "greedy".to_string(),
            decode_temperature: 1.0,
            decode_seed: 0,
            decode_max_len: run.curation.decode.max_len,
            n_stages: run.schedule.n_stages,
            tau0: run.schedule.tau0,
            tau_n: run.schedule.tau_n,
            alpha0: run.schedule.alpha0,
            alpha_n: run.schedule.alpha_n,
            epochs_per_stage: run.schedule.epochs_per_stage,
            divergence: run.divergence.kind,
            beta: run.divergence.beta,
            tau_sq_scaling: run.divergence.tau_sq_scaling,
            embed_dim: 8,
            hidden_dim: 16,
            context: 8,
            data: None,
            max_len: 32,
            split_train: 0.8,
            split_valid: 0.1,
            split_test: 0.1,
            split_seed: 0,
            teacher_checkpoint: None,
            teacher_embed_dim: 32,
            teacher_hidden_dim: 64,
            teacher_epochs: 12,
            teacher_learning_rate: 0.1,
            teacher_momentum: 0.9,
            teacher_batch_size: 16,
            teacher_seed: 0,
            init_student: None,
        }
    }
}

impl CliConfig {
    /// The curation block alone (what `reflect` consumes).
    pub fn curation(&self) -> Result<CurationConfig, CliError> {
        let strategy = match self.decode_strategy.as_str() {
            "greedy" => DecodeStrategy::Greedy,
            "sample" => DecodeStrategy::Sample {
                temperature: self.decode_temperature,
                seed: self.decode_seed,
            },
            other => {
                return Err(usage(format!(
                    "config key decode_strategy: expected greedy or sample, got \"{other}\""
                )))
            }
        };
        Ok(CurationConfig {
            lambda: self.lambda,
            rrf_k: self.rrf_k,
            ce_source: self.ce_source,
            ranking: self.ranking,
            decode: DecodeConfig {
                strategy,
                max_len: self.decode_max_len,
            },
        })
    }

    /// The full run configuration for a known vocabulary size.
    pub fn to_run_config(&self, mode: RunMode, vocab_size: usize) -> Result<RunConfig, CliError> {
        let mut run = RunConfig::new(
            mode,
            LmConfig {
                vocab_size,
                context: self.context,
                embed_dim: self.embed_dim,
                hidden_dim: self.hidden_dim,
            },
        );
        run.order = self.order;
        run.seed = self.seed;
        run.batch_size = self.batch_size;
        run.baseline_epochs = self.baseline_epochs;
        run.learning_rate = self.learning_rate;
        run.momentum = self.momentum;
        run.patience = self.patience;
        run.cache_teacher_logits = self.cache_teacher_logits;
        run.sgo_mix = self.sgo_mix;
        run.sample_max_len = self.sample_max_len;
        run.eval_max_len = self.eval_max_len;
        run.curation = self.curation()?;
        run.schedule.n_stages = self.n_stages;
        run.schedule.tau0 = self.tau0;
        run.schedule.tau_n = self.tau_n;
        run.schedule.alpha0 = self.alpha0;
        run.schedule.alpha_n = self.alpha_n;
        run.schedule.epochs_per_stage = self.epochs_per_stage;
        run.divergence.kind = self.divergence;
        run.divergence.beta = self.beta;
        run.divergence.tau_sq_scaling = self.tau_sq_scaling;
        Ok(run)
    }

    /// The teacher's supervised-training settings for a known vocabulary.
    pub fn teacher_sft(&self, vocab_size: usize) -> SftConfig {
        SftConfig {
            lm: LmConfig {
                vocab_size,
                context: self.context,
                embed_dim: self.teacher_embed_dim,
                hidden_dim: self.teacher_hidden_dim,
            },
            epochs: self.teacher_epochs,
            learning_rate: self.teacher_learning_rate,
            momentum: self.teacher_momentum,
            batch_size: self.teacher_batch_size,
        }
    }
}

/// Key store with typed extraction; leftovers are unknown keys.
struct KeyBag(BTreeMap<String, String>);

impl KeyBag {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|err| {
                usage(format!("config key {key}: {err} (got \"{raw}\")"))
            }),
        }
    }

    fn take_string(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }
}

/// Parses config text into a [`CliConfig`], rejecting unknown keys.
pub fn parse_config(text: &str) -> Result<CliConfig, CliError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage(format!(
                "config line {}: expected key=value, got \"{}\"",
                idx + 1,
                raw.trim()
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let mut bag = KeyBag(map);
    let d = CliConfig::default();

    let mode = match bag.take_string("mode") {
        None => None,
        Some(raw) => Some(
            raw.parse::<RunMode>()
                .map_err(|err| usage(format!("config key mode: {err}")))?,
        ),
    };
    let cfg = CliConfig {
        mode,
        order: bag.take("order", d.order)?,
        seed: bag.take("seed", d.seed)?,
        batch_size: bag.take("batch_size", d.batch_size)?,
        baseline_epochs: bag.take("baseline_epochs", d.baseline_epochs)?,
        learning_rate: bag.take("learning_rate", d.learning_rate)?,
        momentum: bag.take("momentum", d.momentum)?,
        patience: bag.take("patience", d.patience)?,
        cache_teacher_logits: bag.take("cache_teacher_logits", d.cache_teacher_logits)?,
        sgo_mix: bag.take("sgo_mix", d.sgo_mix)?,
        sample_max_len: bag.take("sample_max_len", d.sample_max_len)?,
        eval_max_len: bag.take("eval_max_len", d.eval_max_len)?,
        lambda: bag.take("lambda", d.lambda)?,
        rrf_k: bag.take("rrf_k", d.rrf_k)?,
        ce_source: bag.take("ce_source", d.ce_source)?,
        ranking: bag.take("ranking", d.ranking)?,
        decode_strategy: bag
            .take_string("decode_strategy")
            .unwrap_or(d.decode_strategy),
        decode_temperature: bag.take("decode_temperature", d.decode_temperature)?,
        decode_seed: bag.take("decode_seed", d.decode_seed)?,
        decode_max_len: bag.take("decode_max_len", d.decode_max_len)?,
        n_stages: bag.take("n_stages", d.n_stages)?,
        tau0: bag.take("tau0", d.tau0)?,
        tau_n: bag.take("tau_n", d.tau_n)?,
        alpha0: bag.take("alpha0", d.alpha0)?,
        alpha_n: bag.take("alpha_n", d.alpha_n)?,
        epochs_per_stage: bag.take("epochs_per_stage", d.epochs_per_stage)?,
        divergence: bag.take("divergence", d.divergence)?,
        beta: bag.take("beta", d.beta)?,
        tau_sq_scaling: bag.take("tau_sq_scaling", d.tau_sq_scaling)?,
        embed_dim: bag.take("embed_dim", d.embed_dim)?,
        hidden_dim: bag.take("hidden_dim", d.hidden_dim)?,
        context: bag.take("context", d.context)?,
        data: bag.take_string("data"),
        max_len: bag.take("max_len", d.max_len)?,
        split_train: bag.take("split_train", d.split_train)?,
        split_valid: bag.take("split_valid", d.split_valid)?,
        split_test: bag.take("split_test", d.split_test)?,
        split_seed: bag.take("split_seed", d.split_seed)?,
        teacher_checkpoint: bag.take_string("teacher_checkpoint"),
        teacher_embed_dim: bag.take("teacher_embed_dim", d.teacher_embed_dim)?,
        teacher_hidden_dim: bag.take("teacher_hidden_dim", d.teacher_hidden_dim)?,
        teacher_epochs: bag.take("teacher_epochs", d.teacher_epochs)?,
        teacher_learning_rate: bag.take("teacher_learning_rate", d.teacher_learning_rate)?,
        teacher_momentum: bag.take("teacher_momentum", d.teacher_momentum)?,
        teacher_batch_size: bag.take("teacher_batch_size", d.teacher_batch_size)?,
        teacher_seed: bag.take("teacher_seed", d.teacher_seed)?,
        init_student: bag.take_string("init_student"),
    };
    // Surface the strategy typo even if no command consumes curation.
    cfg.curation()?;

    if !bag.0.is_empty() {
        let unknown: Vec<&str> = bag.0.keys().map(String::as_str).collect();
        return Err(usage(format!(
            "unknown config key(s): {}",
            unknown.join(", ")
        )));
    }
    Ok(cfg)
}
