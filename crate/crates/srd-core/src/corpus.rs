//! Prompt–response corpora: JSONL loading, whitespace tokenization,
//! vocabulary construction, deterministic splits, and synthetic generators.
//!
//! Every vocabulary reserves ids 0..4 for `<pad>`, `<bos>`, `<eos>`, `<unk>`;
//! real surfaces start at id 4 and are ordered by descending corpus frequency
//! (ties by ascending surface form), so vocabularies are a pure function of
//! the corpus text.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`Vocabulary`].
pub type TokenId = u32;

/// Padding token, used to left-fill model contexts.
pub const PAD: TokenId = 0;
/// Beginning-of-sequence token, prepended before the prompt.
pub const BOS: TokenId = 1;
/// End-of-sequence token, the supervised stop target for every response.
pub const EOS: TokenId = 2;
/// Unknown token, the fallback for out-of-vocabulary surfaces.
pub const UNK: TokenId = 3;
/// Number of reserved control tokens at the bottom of every vocabulary.
pub const RESERVED: usize = 4;

const RESERVED_SURFACES: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Errors raised while reading, validating, or splitting corpora.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: invalid record: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {field} is empty after tokenization")]
    EmptyField { line: usize, field: &'static str },
    #[error("no records in corpus")]
    Empty,
    #[error("split fractions must sum to 1 (got {sum})")]
    BadFractions { sum: f64 },
    #[error("unknown template {0:?} (expected copy, reverse, or pattern)")]
    UnknownTemplate(String),
    #[error("vocabulary is missing the reserved prefix <pad> <bos> <eos> <unk>")]
    MissingReserved,
}

/// One untokenized corpus record as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub prompt: String,
    pub response: String,
}

/// Token surface table with the reserved control prefix at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_surfaces(surfaces: Vec<String>) -> Self {
        let index = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Vocabulary { surfaces, index }
    }

    /// Number of entries, reserved tokens included.
    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Surface form for `id`; panics if `id` is out of range.
    pub fn surface(&self, id: TokenId) -> &str {
        &self.surfaces[id as usize]
    }

    /// Id of `surface`, if present.
    pub fn token_id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Lowercases, splits on whitespace, and maps each word to its id
    /// (unknown surfaces map to [`UNK`]).
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index.get(&w).copied().unwrap_or(UNK)
            })
            .collect()
    }

    /// Joins surface forms with single spaces; inverse of [`encode`] for
    /// lowercase in-vocabulary text.
    ///
    /// [`encode`]: Vocabulary::encode
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.surface(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.surfaces
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = CorpusError;

    fn try_from(surfaces: Vec<String>) -> Result<Self, CorpusError> {
        if surfaces.len() < RESERVED
            || surfaces[..RESERVED]
                .iter()
                .zip(RESERVED_SURFACES)
                .any(|(got, want)| got != want)
        {
            return Err(CorpusError::MissingReserved);
        }
        Ok(Vocabulary::from_surfaces(surfaces))
    }
}

/// Builds a vocabulary from raw records: the reserved prefix, then corpus
/// surfaces with count >= `min_count`, ordered by descending frequency and
/// ascending surface form on ties.
pub fn build_vocab(records: &[RawRecord], min_count: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for rec in records {
        for word in rec.prompt.split_whitespace().chain(rec.response.split_whitespace()) {
            *counts.entry(word.to_lowercase()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(surface, count)| {
            *count >= min_count.max(1) && !RESERVED_SURFACES.contains(&surface.as_str())
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut surfaces: Vec<String> = RESERVED_SURFACES.iter().map(|s| s.to_string()).collect();
    surfaces.extend(ranked.into_iter().map(|(surface, _)| surface));
    Vocabulary::from_surfaces(surfaces)
}

/// One tokenized training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptResponsePair {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// A tokenized corpus plus the vocabulary that interprets it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<PromptResponsePair>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Counts reported by [`tokenize_records`] / [`load_jsonl`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    /// Pairs kept in the dataset.
    pub kept: usize,
    /// Pairs dropped because prompt or response exceeded `max_len` tokens.
    pub dropped_over_length: usize,
}

/// Parses a JSONL file of `{id, prompt, response}` records, reporting the
/// 1-based line of the first malformed line, duplicate id, or blank field.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RawRecord>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line).map_err(|source| CorpusError::Parse {
            line: line_no,
            source,
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        if rec.prompt.split_whitespace().next().is_none() {
            return Err(CorpusError::EmptyField {
                line: line_no,
                field: "prompt",
            });
        }
        if rec.response.split_whitespace().next().is_none() {
            return Err(CorpusError::EmptyField {
                line: line_no,
                field: "response",
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(records)
}

/// Tokenizes records with `vocab`, dropping (and counting) pairs whose prompt
/// or response exceeds `max_len` tokens.
pub fn tokenize_records(
    records: &[RawRecord],
    vocab: Vocabulary,
    max_len: usize,
) -> (Dataset, LoadStats) {
    let mut pairs = Vec::with_capacity(records.len());
    let mut dropped = 0usize;
    for rec in records {
        let prompt = vocab.encode(&rec.prompt);
        let response = vocab.encode(&rec.response);
        if prompt.len() > max_len || response.len() > max_len {
            dropped += 1;
            continue;
        }
        pairs.push(PromptResponsePair {
            id: rec.id.clone(),
            prompt,
            response,
        });
    }
    let stats = LoadStats {
        kept: pairs.len(),
        dropped_over_length: dropped,
    };
    (Dataset { pairs, vocab }, stats)
}

/// Loads a JSONL corpus end to end: parse, build the vocabulary (every
/// surface kept), tokenize, and drop over-length pairs.
pub fn load_jsonl(
    path: impl AsRef<Path>,
    max_len: usize,
) -> Result<(Dataset, LoadStats), CorpusError> {
    let records = read_records(path)?;
    let vocab = build_vocab(&records, 1);
    Ok(tokenize_records(&records, vocab, max_len))
}

/// Train / validation / test portions of one corpus, sharing a vocabulary.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Seeded-shuffle split into contiguous train/valid/test slices.
///
/// Sizes follow the floor rule: `|valid| = floor(N * valid_frac)`,
/// `|test| = floor(N * test_frac)`, and the remainder goes to train.
pub fn split(
    dataset: Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Splits, CorpusError> {
    let (train_frac, valid_frac, test_frac) = fractions;
    let sum = train_frac + valid_frac + test_frac;
    if (sum - 1.0).abs() > 1e-9
        || !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&valid_frac)
        || !(0.0..=1.0).contains(&test_frac)
    {
        return Err(CorpusError::BadFractions { sum });
    }
    let Dataset { mut pairs, vocab } = dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);

    let n = pairs.len();
    let n_valid = (n as f64 * valid_frac).floor() as usize;
    let n_test = (n as f64 * test_frac).floor() as usize;
    let n_train = n - n_valid - n_test;

    let test = pairs.split_off(n_train + n_valid);
    let valid = pairs.split_off(n_train);
    Ok(Splits {
        train: Dataset {
            pairs,
            vocab: vocab.clone(),
        },
        valid: Dataset {
            pairs: valid,
            vocab: vocab.clone(),
        },
        test: Dataset { pairs: test, vocab },
    })
}

/// Built-in synthetic task families.
///
/// Every family exposes a per-sample difficulty level: the payload length
/// (and with it the response length and the pattern depth) grows with the
/// level, so a true easy-to-hard ordering exists by construction. With the
/// default model context of 8 tokens the deepest `reverse` levels are
/// partially unpredictable — their source token has already slid out of the
/// context window — which makes the hardest band genuinely noisy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `copy a b c` -> `a b c`
    Copy,
    /// `rev a b c` -> `c b a`
    Reverse,
    /// `pat a b` -> `a b a b` (period continued for level + 2 tokens)
    Pattern,
}

impl Template {
    fn marker(self) -> &'static str {
        match self {
            Template::Copy => "copy",
            Template::Reverse => "rev",
            Template::Pattern => "pat",
        }
    }
}

impl FromStr for Template {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, CorpusError> {
        match s {
            "copy" => Ok(Template::Copy),
            "reverse" => Ok(Template::Reverse),
            "pattern" => Ok(Template::Pattern),
            other => Err(CorpusError::UnknownTemplate(other.to_string())),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Template::Copy => "copy",
            Template::Reverse => "reverse",
            Template::Pattern => "pattern",
        };
        f.write_str(name)
    }
}

/// Knobs for [`generate_synthetic`].
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub template: Template,
    /// Distinct payload words (single letters starting at `a`), at most 26.
    pub alphabet: usize,
    /// Difficulty grades; level L draws an L-token payload.
    pub levels: usize,
    /// Fraction of records whose response is replaced with uniformly random
    /// letters of the rule's length (`0.0..=1.0`, default `0.0`).
    ///
    /// Corrupted records keep their prompt, length, and difficulty grade, so
    /// they are indistinguishable from clean ones by surface shape — only a
    /// model that has internalized the rule can tell them apart. They are the
    /// classic target for sample filtering: training on them injects
    /// contradictory gradients at every difficulty level, while a
    /// student-informed score flags them as the hardest band of the corpus.
    pub label_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            template: Template::Reverse,
            alphabet: 8,
            levels: 6,
            label_noise: 0.0,
        }
    }
}

/// Deterministically generates `count` records; ids carry the running index
/// and the drawn difficulty level (`rev-00012-d4`).
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize, seed: u64) -> Vec<RawRecord> {
    assert!(
        (1..=26).contains(&spec.alphabet),
        "alphabet must be in 1..=26"
    );
    assert!(spec.levels >= 1, "levels must be >= 1");
    assert!(
        (0.0..=1.0).contains(&spec.label_noise),
        "label_noise must be in 0.0..=1.0"
    );
    let letters: Vec<String> = (0..spec.alphabet)
        .map(|i| ((b'a' + i as u8) as char).to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let level = rng.gen_range(1..=spec.levels);
        let payload: Vec<&str> = (0..level)
            .map(|_| letters[rng.gen_range(0..letters.len())].as_str())
            .collect();
        let mut response: Vec<&str> = match spec.template {
            Template::Copy => payload.clone(),
            Template::Reverse => payload.iter().rev().copied().collect(),
            Template::Pattern => (0..level + 2).map(|j| payload[j % level]).collect(),
        };
        if rng.gen::<f64>() < spec.label_noise {
            for slot in response.iter_mut() {
                *slot = letters[rng.gen_range(0..letters.len())].as_str();
            }
        }
        records.push(RawRecord {
            id: format!("{}-{:05}-d{}", spec.template.marker(), i, level),
            prompt: format!("{} {}", spec.template.marker(), payload.join(" ")),
            response: response.join(" "),
        });
    }
    records
}

/// Difficulty level encoded in a synthetic record id, if present.
pub fn synthetic_level(id: &str) -> Option<usize> {
    id.rsplit_once("-d")?.1.parse().ok()
}

/// Serializes records as JSON Lines (one compact object per line).
pub fn records_to_jsonl(records: &[RawRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}
