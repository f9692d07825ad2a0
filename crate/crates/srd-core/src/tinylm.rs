//! A deliberately tiny fixed-context MLP language model.
//!
//! The model embeds the last `context` tokens (left-padded with `<pad>`),
//! concatenates the embeddings, and applies one tanh hidden layer:
//!
//! ```text
//! logits = tanh(concat(E[ctx]) * W1 + b1) * W2 + b2
//! ```
//!
//! Backpropagation is hand-derived and batched; the optimizer is SGD with
//! classical momentum. Everything is `f64`, seeded, and single-threaded per
//! call, so training runs are bit-reproducible. Gradients treat the softmax
//! as unfloored; the probability floor in [`divergence::temp_softmax`] is a
//! numerical guard that never binds at the logit scales these models reach.
//!
//! [`divergence::temp_softmax`]: crate::divergence::temp_softmax

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, Vocabulary, BOS, EOS, PAD, RESERVED};
use crate::divergence::{
    self, temp_softmax, DivergenceError, DivergenceSpec, LossBreakdown,
};
use crate::metrics::{self, CeResult, MetricsError};

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    /// Context window length `c`; shorter histories are left-padded.
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size <= RESERVED
            || self.context == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
        {
            return Err(ModelError::BadConfig(*self));
        }
        Ok(())
    }
}

/// Errors raised by model evaluation, training steps, and checkpoints.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config {0:?}")]
    BadConfig(LmConfig),
    #[error("context has {got} tokens, model expects {expected}")]
    ContextLength { expected: usize, got: usize },
    #[error("token id {token} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("teacher logits required when alpha < 1")]
    MissingTeacherLogits,
    #[error("teacher logits have {got} entries, student vocab is {expected}")]
    TeacherSupport { expected: usize, got: usize },
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint io failed for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {got} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { got: u32 },
    #[error("checkpoint vocab has {vocab} entries but config says {config}")]
    VocabSizeMismatch { vocab: usize, config: usize },
    #[error("checkpoint tensor {tensor} has the wrong shape")]
    ShapeMismatch { tensor: &'static str },
}

/// Model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLm {
    pub config: LmConfig,
    /// vocab_size x embed_dim token embeddings.
    pub embedding: Array2<f64>,
    /// (context * embed_dim) x hidden_dim input weights.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// hidden_dim x vocab_size output weights.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl TinyLm {
    /// Seeded init with every parameter drawn uniformly from [-0.1, 0.1).
    /// Draw order is fixed (embedding, w1, b1, w2, b2, each row-major), so a
    /// seed fully determines the parameters.
    pub fn init(config: LmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_: ()| rng.gen_range(-0.1..0.1);
        let cd = config.context * config.embed_dim;
        TinyLm {
            embedding: Array2::from_shape_fn((config.vocab_size, config.embed_dim), |_| draw(())),
            w1: Array2::from_shape_fn((cd, config.hidden_dim), |_| draw(())),
            b1: Array1::from_shape_fn(config.hidden_dim, |_| draw(())),
            w2: Array2::from_shape_fn((config.hidden_dim, config.vocab_size), |_| draw(())),
            b2: Array1::from_shape_fn(config.vocab_size, |_| draw(())),
            config,
        }
    }

    /// All-zero parameters: every context yields uniform logits. Handy for
    /// tests that need an exactly uniform model.
    pub fn zeros(config: LmConfig) -> Self {
        let cd = config.context * config.embed_dim;
        TinyLm {
            embedding: Array2::zeros((config.vocab_size, config.embed_dim)),
            w1: Array2::zeros((cd, config.hidden_dim)),
            b1: Array1::zeros(config.hidden_dim),
            w2: Array2::zeros((config.hidden_dim, config.vocab_size)),
            b2: Array1::zeros(config.vocab_size),
            config,
        }
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        for &t in tokens {
            if (t as usize) >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Logits for one context window of exactly `config.context` tokens.
    pub fn forward(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let cache = self.forward_batch(std::slice::from_ref(&context))?;
        Ok(cache.logits.row(0).to_vec())
    }

    /// Logits for many context windows at once (one matrix multiply).
    pub fn forward_many(&self, contexts: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, ModelError> {
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let cache = self.forward_batch(contexts)?;
        Ok(cache
            .logits
            .axis_iter(Axis(0))
            .map(|row| row.to_vec())
            .collect())
    }

    /// Batched forward pass keeping the activations needed for backprop.
    fn forward_batch(&self, contexts: &[&[TokenId]]) -> Result<ForwardCache, ModelError> {
        let c = self.config.context;
        let d = self.config.embed_dim;
        let mut x = Array2::zeros((contexts.len(), c * d));
        for (row, ctx) in contexts.iter().enumerate() {
            if ctx.len() != c {
                return Err(ModelError::ContextLength {
                    expected: c,
                    got: ctx.len(),
                });
            }
            self.check_tokens(ctx)?;
            for (slot, &tok) in ctx.iter().enumerate() {
                x.slice_mut(s![row, slot * d..(slot + 1) * d])
                    .assign(&self.embedding.row(tok as usize));
            }
        }
        let hidden = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let logits = hidden.dot(&self.w2) + &self.b2;
        Ok(ForwardCache { x, hidden, logits })
    }
}

struct ForwardCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
    logits: Array2<f64>,
}

/// The trailing `context` tokens of `seq`, left-padded with `<pad>`.
fn window(seq: &[TokenId], context: usize) -> Vec<TokenId> {
    let mut out = vec![PAD; context.saturating_sub(seq.len())];
    let start = seq.len().saturating_sub(context);
    out.extend_from_slice(&seq[start..]);
    out
}

/// Teacher-forcing prediction atoms for one pair: the model predicts each
/// target token (plus `<eos>` when `include_eos`) from the trailing context
/// window of `<bos>` + prompt + tokens-so-far.
pub fn forcing_atoms(
    prompt: &[TokenId],
    target: &[TokenId],
    context: usize,
    include_eos: bool,
) -> Vec<(Vec<TokenId>, TokenId)> {
    let mut seq = Vec::with_capacity(1 + prompt.len() + target.len());
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    let targets = target
        .iter()
        .copied()
        .chain(include_eos.then_some(EOS));
    let mut atoms = Vec::with_capacity(target.len() + 1);
    for t in targets {
        atoms.push((window(&seq, context), t));
        seq.push(t);
    }
    atoms
}

/// Per-position softmax (tau = 1) probabilities of `target` given `prompt`,
/// reduced to a cross-entropy result. `include_eos` appends the `<eos>`
/// prediction that training also supervises.
pub fn sequence_ce(
    model: &TinyLm,
    prompt: &[TokenId],
    target: &[TokenId],
    include_eos: bool,
) -> Result<CeResult, ModelError> {
    let atoms = forcing_atoms(prompt, target, model.config.context, include_eos);
    if atoms.is_empty() {
        return Ok(CeResult::empty());
    }
    let contexts: Vec<&[TokenId]> = atoms.iter().map(|(c, _)| c.as_slice()).collect();
    let cache = model.forward_batch(&contexts)?;
    let mut dists = Vec::with_capacity(atoms.len());
    for row in cache.logits.axis_iter(Axis(0)) {
        dists.push(temp_softmax(&row.to_vec(), 1.0)?.probs().to_vec());
    }
    let targets: Vec<TokenId> = atoms.iter().map(|(_, t)| *t).collect();
    Ok(metrics::token_cross_entropy(&dists, &targets)?)
}

/// One training atom: a context window, its target, and (when distilling)
/// the teacher's logits for the same window.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub context: Vec<TokenId>,
    pub target: TokenId,
    pub teacher_logits: Option<Vec<f64>>,
}

/// Parameter-shaped gradient (or momentum) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    pub fn zeros(config: &LmConfig) -> Self {
        let cd = config.context * config.embed_dim;
        Gradients {
            embedding: Array2::zeros((config.vocab_size, config.embed_dim)),
            w1: Array2::zeros((cd, config.hidden_dim)),
            b1: Array1::zeros(config.hidden_dim),
            w2: Array2::zeros((config.hidden_dim, config.vocab_size)),
            b2: Array1::zeros(config.vocab_size),
        }
    }
}

/// Mean loss over a batch plus the full backpropagated gradients.
#[derive(Debug)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grads: Gradients,
}

/// Mean-over-batch mixed loss `alpha * ce + (1 - alpha) * kd` and its
/// gradients.
///
/// - The cross-entropy term is always evaluated (it is reported even for
///   pure-KD stages) but only contributes `alpha` of the gradient.
/// - The KD term uses each atom's teacher logits at `spec.tau` with
///   `spec.tau_sq_scaling` applied; it is skipped entirely at `alpha = 1`,
///   which makes an alpha-1 stage exactly pure supervised fine-tuning.
/// - Duplicating every batch element leaves the means (and so the
///   gradients) unchanged.
pub fn loss_and_grad(
    model: &TinyLm,
    batch: &[BatchItem],
    alpha: f64,
    spec: &DivergenceSpec,
) -> Result<BatchLoss, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(ModelError::Divergence(DivergenceError::BadAlpha(alpha)));
    }
    spec.validate()?;
    let v = model.config.vocab_size;
    let contexts: Vec<&[TokenId]> = batch.iter().map(|item| item.context.as_slice()).collect();
    let cache = model.forward_batch(&contexts)?;

    let inv_b = 1.0 / batch.len() as f64;
    let kd_scale = if spec.tau_sq_scaling {
        spec.tau * spec.tau
    } else {
        1.0
    };
    let mut dlogits = Array2::zeros((batch.len(), v));
    let mut ce_sum = 0.0;
    let mut kd_sum = 0.0;
    for (i, item) in batch.iter().enumerate() {
        if (item.target as usize) >= v {
            return Err(ModelError::TokenOutOfRange {
                token: item.target,
                vocab_size: v,
            });
        }
        let student_logits = cache.logits.row(i).to_vec();
        let q1 = temp_softmax(&student_logits, 1.0)?;
        ce_sum -= q1.probs()[item.target as usize].ln();
        if alpha > 0.0 {
            let weight = alpha * inv_b;
            for (j, &qj) in q1.probs().iter().enumerate() {
                let onehot = (j == item.target as usize) as u8 as f64;
                dlogits[[i, j]] += weight * (qj - onehot);
            }
        }
        if alpha < 1.0 {
            let teacher = item
                .teacher_logits
                .as_deref()
                .ok_or(ModelError::MissingTeacherLogits)?;
            if teacher.len() != v {
                return Err(ModelError::TeacherSupport {
                    expected: v,
                    got: teacher.len(),
                });
            }
            let p = temp_softmax(teacher, spec.tau)?;
            let q = temp_softmax(&student_logits, spec.tau)?;
            kd_sum += kd_scale * divergence::divergence(spec.kind, &p, &q, spec.beta)?;
            let kd = divergence::kd_grad(teacher, &student_logits, spec)?;
            let weight = (1.0 - alpha) * inv_b;
            for (j, g) in kd.into_iter().enumerate() {
                dlogits[[i, j]] += weight * g;
            }
        }
    }

    // Backprop through logits = tanh(x W1 + b1) W2 + b2.
    let dw2 = cache.hidden.t().dot(&dlogits);
    let db2 = dlogits.sum_axis(Axis(0));
    let dhidden = dlogits.dot(&model.w2.t());
    let dpre = dhidden * cache.hidden.mapv(|h| 1.0 - h * h);
    let dw1 = cache.x.t().dot(&dpre);
    let db1 = dpre.sum_axis(Axis(0));
    let dx = dpre.dot(&model.w1.t());

    let d = model.config.embed_dim;
    let mut dembedding = Array2::zeros((v, d));
    for (i, item) in batch.iter().enumerate() {
        for (slot, &tok) in item.context.iter().enumerate() {
            let mut row = dembedding.row_mut(tok as usize);
            row += &dx.slice(s![i, slot * d..(slot + 1) * d]);
        }
    }

    let breakdown = divergence::total_loss(ce_sum * inv_b, kd_sum * inv_b, alpha)?;
    Ok(BatchLoss {
        breakdown,
        grads: Gradients {
            embedding: dembedding,
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    })
}

/// SGD with classical momentum: `buf = mu * buf + g; w -= lr * buf`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub step_count: u64,
    velocity: Gradients,
}

impl Optimizer {
    pub fn new(config: &LmConfig, learning_rate: f64, momentum: f64) -> Self {
        Optimizer {
            learning_rate,
            momentum,
            step_count: 0,
            velocity: Gradients::zeros(config),
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, model: &mut TinyLm, grads: &Gradients) {
        let mu = self.momentum;
        let lr = self.learning_rate;
        macro_rules! update {
            ($field:ident) => {
                self.velocity.$field.zip_mut_with(&grads.$field, |v, &g| {
                    *v = mu * *v + g;
                });
                model.$field.zip_mut_with(&self.velocity.$field, |w, &v| {
                    *w -= lr * v;
                });
            };
        }
        update!(embedding);
        update!(w1);
        update!(b1);
        update!(w2);
        update!(b2);
        self.step_count += 1;
    }
}

/// Greedy continuation of `prompt`, at most `max_len` tokens.
///
/// Reserved control tokens are never emitted: the candidate set is the
/// non-reserved vocabulary, ties break toward the lowest id, and generation
/// stops early only when the `<eos>` logit strictly exceeds every
/// non-reserved logit. (A uniform model therefore emits the lowest
/// non-reserved id, 4, for `max_len` steps.)
pub fn greedy_decode(
    model: &TinyLm,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>, ModelError> {
    model.check_tokens(prompt)?;
    let v = model.config.vocab_size;
    let mut seq = Vec::with_capacity(1 + prompt.len() + max_len);
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = model.forward(&window(&seq, model.config.context))?;
        let mut best = RESERVED;
        for j in RESERVED + 1..v {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        if logits[EOS as usize] > logits[best] {
            break;
        }
        seq.push(best as TokenId);
        out.push(best as TokenId);
    }
    Ok(out)
}

/// Seeded ancestral sampling at `temperature`. The support is the
/// non-reserved vocabulary plus `<eos>`; drawing `<eos>` stops generation.
pub fn sample_decode(
    model: &TinyLm,
    prompt: &[TokenId],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenId>, ModelError> {
    model.check_tokens(prompt)?;
    let v = model.config.vocab_size;
    let candidates: Vec<usize> = std::iter::once(EOS as usize)
        .chain(RESERVED..v)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = Vec::with_capacity(1 + prompt.len() + max_len);
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = model.forward(&window(&seq, model.config.context))?;
        let scores: Vec<f64> = candidates.iter().map(|&j| logits[j]).collect();
        let probs = temp_softmax(&scores, temperature)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut picked = candidates.len() - 1;
        for (k, &p) in probs.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                picked = k;
                break;
            }
        }
        let token = candidates[picked] as TokenId;
        if token == EOS {
            break;
        }
        seq.push(token);
        out.push(token);
    }
    Ok(out)
}

/// On-disk checkpoint: versioned JSON of decimal parameters plus the
/// vocabulary that the model was trained with, so downstream commands can
/// reproduce its exact tokenization. JSON `f64` round-trips are bit-exact.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: LmConfig,
    vocab: Vocabulary,
    embedding: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

/// Writes `model` and its vocabulary to `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &TinyLm,
    vocab: &Vocabulary,
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: model.config,
        vocab: vocab.clone(),
        embedding: model.embedding.clone(),
        w1: model.w1.clone(),
        b1: model.b1.clone(),
        w2: model.w2.clone(),
        b2: model.b2.clone(),
    };
    let json = serde_json::to_string(&checkpoint)?;
    fs::write(path, json).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a checkpoint back, validating version, vocabulary size, and tensor
/// shapes. Loading what [`save_checkpoint`] wrote reproduces the parameters
/// bit for bit.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TinyLm, Vocabulary), ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion {
            got: checkpoint.version,
        });
    }
    let config = checkpoint.config;
    config.validate()?;
    if checkpoint.vocab.len() != config.vocab_size {
        return Err(ModelError::VocabSizeMismatch {
            vocab: checkpoint.vocab.len(),
            config: config.vocab_size,
        });
    }
    let cd = config.context * config.embed_dim;
    let expect = |ok: bool, tensor: &'static str| {
        if ok {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch { tensor })
        }
    };
    expect(
        checkpoint.embedding.dim() == (config.vocab_size, config.embed_dim),
        "embedding",
    )?;
    expect(checkpoint.w1.dim() == (cd, config.hidden_dim), "w1")?;
    expect(checkpoint.b1.len() == config.hidden_dim, "b1")?;
    expect(
        checkpoint.w2.dim() == (config.hidden_dim, config.vocab_size),
        "w2",
    )?;
    expect(checkpoint.b2.len() == config.vocab_size, "b2")?;
    Ok((
        TinyLm {
            config,
            embedding: checkpoint.embedding,
            w1: checkpoint.w1,
            b1: checkpoint.b1,
            w2: checkpoint.w2,
            b2: checkpoint.b2,
        },
        checkpoint.vocab,
    ))
}
