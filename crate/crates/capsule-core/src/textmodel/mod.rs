//! Small decoder-only causal language model with tokenizer, training losses,
//! generation, and hidden-state access.
//!
//! The same model type is instantiated twice by the rest of the crate: once
//! as the trainable compressor and once as a frozen scorer. All arithmetic is
//! f64 with fixed accumulation order, so results are bit-reproducible.

pub mod checkpoint;
pub(crate) mod math;
pub mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use math::Mat;
pub use model::{DecodeState, ForwardPass, Gradients};

use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type TokenId = u32;

/// One vocabulary unit: a whole word or a single fallback character.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Word(String),
    Char(char),
}

/// Word-level vocabulary with character fallback for unknown words.
///
/// Ids are dense in `[0, len)`. Ids 0..=2 are reserved for `<pad>`, `<unk>`,
/// `<eos>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    units: Vec<Unit>,
    #[serde(skip)]
    word_ids: BTreeMap<String, TokenId>,
    #[serde(skip)]
    char_ids: BTreeMap<char, TokenId>,
    pub pad_id: TokenId,
    pub unk_id: TokenId,
    pub eos_id: TokenId,
}

impl Vocabulary {
    /// Build from a corpus of text. Every whitespace-separated word becomes
    /// a unit, as does every character occurring in any word (the fallback
    /// alphabet). Insertion order is sorted, so ids are deterministic.
    pub fn build(texts: &[&str]) -> Self {
        let mut words = std::collections::BTreeSet::new();
        let mut chars = std::collections::BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                words.insert(w.to_string());
                for c in w.chars() {
                    chars.insert(c);
                }
            }
        }
        let mut units = vec![
            Unit::Word("<pad>".into()),
            Unit::Word("<unk>".into()),
            Unit::Word("<eos>".into()),
        ];
        units.extend(words.into_iter().map(Unit::Word));
        units.extend(chars.into_iter().map(Unit::Char));
        let mut v = Vocabulary {
            units,
            word_ids: BTreeMap::new(),
            char_ids: BTreeMap::new(),
            pad_id: 0,
            unk_id: 1,
            eos_id: 2,
        };
        v.rebuild_index();
        v
    }

    /// Word-only vocabulary for tests and toy setups.
    pub fn from_words(words: &[&str]) -> Self {
        Self::build(&[words.join(" ").as_str()])
    }

    /// Rebuilds the lookup maps after deserialization.
    pub fn rebuild_index(&mut self) {
        self.word_ids.clear();
        self.char_ids.clear();
        for (i, u) in self.units.iter().enumerate() {
            match u {
                Unit::Word(w) => {
                    self.word_ids.insert(w.clone(), i as TokenId);
                }
                Unit::Char(c) => {
                    self.char_ids.insert(*c, i as TokenId);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit(&self, id: TokenId) -> Option<&Unit> {
        self.units.get(id as usize)
    }

    pub fn word_id(&self, w: &str) -> Option<TokenId> {
        self.word_ids.get(w).copied()
    }

    /// Total function: words not in the vocabulary decompose into their
    /// characters, and characters outside the fallback alphabet map to
    /// `unk_id`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            if let Some(&id) = self.word_ids.get(w) {
                ids.push(id);
            } else {
                for c in w.chars() {
                    ids.push(self.char_ids.get(&c).copied().unwrap_or(self.unk_id));
                }
            }
        }
        TokenSequence { ids }
    }

    /// Inverse of [`tokenize`] up to whitespace normalization. Consecutive
    /// character units merge into one word; special tokens render as nothing.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        let mut in_char_run = false;
        for &id in &seq.ids {
            if id == self.pad_id || id == self.eos_id {
                in_char_run = false;
                continue;
            }
            match self.units.get(id as usize) {
                Some(Unit::Word(w)) => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    if id == self.unk_id {
                        out.push_str("<unk>");
                    } else {
                        out.push_str(w);
                    }
                    in_char_run = false;
                }
                Some(Unit::Char(c)) => {
                    if !in_char_run && !out.is_empty() {
                        out.push(' ');
                    }
                    out.push(*c);
                    in_char_run = true;
                }
                None => {
                    in_char_run = false;
                }
            }
        }
        out
    }
}

/// Tokenized text; the universal currency between modules.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concatenation (the ⊕ operator between prompts and questions).
    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        TokenSequence { ids }
    }
}

/// Hyperparameters of the tiny transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_window: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_window == 0 {
            return Err(Error::ConfigInvalid("context_window must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of the causal language model, keyed by layer name.
///
/// The `frozen` flag marks scorer instances; training code refuses to update
/// them and tests bit-compare their weights across pipelines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub weights: BTreeMap<String, Mat>,
    pub frozen: bool,
}

impl ModelParams {
    /// Gaussian init (std 0.02) from the config seed.
    pub fn init(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng_from(config.seed, "model-init");
        let d = config.d_model;
        let v = vocab.len();
        let mut weights = BTreeMap::new();
        let mat = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut m = Mat::zeros(rows, cols);
            for x in m.data.iter_mut() {
                *x = gauss(rng) * 0.02;
            }
            m
        };
        weights.insert("wte".to_string(), mat(v, d, &mut rng));
        weights.insert("wpe".to_string(), mat(config.context_window, d, &mut rng));
        for l in 0..config.n_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                weights.insert(format!("l{l}.{name}"), mat(d, d, &mut rng));
            }
            weights.insert(format!("l{l}.fc1"), mat(4 * d, d, &mut rng));
            weights.insert(format!("l{l}.fc2"), mat(d, 4 * d, &mut rng));
        }
        Ok(ModelParams {
            config,
            vocab,
            weights,
            frozen: false,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(|m| m.len()).sum()
    }

    /// Frozen copy for use as a scorer.
    pub fn frozen_clone(&self) -> Self {
        let mut p = self.clone();
        p.frozen = true;
        p
    }

    /// FNV-1a over the exact bit patterns of every weight, in key order.
    /// Two params with equal fingerprints are bit-identical in practice;
    /// tests use this to prove frozen models were never touched.
    pub fn weights_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, m) in &self.weights {
            for b in name.as_bytes() {
                mix(*b as u64);
            }
            for v in &m.data {
                mix(v.to_bits());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .values()
            .all(|m| m.data.iter().all(|v| v.is_finite()))
    }
}

fn gauss(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    // Box-Muller; two uniform draws per sample keeps the stream layout fixed.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// d-dimensional pooled hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// How a span of hidden states becomes one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMethod {
    /// Arithmetic mean over the span. Length-robust, the default.
    Mean,
    /// Hidden state at the last position of the span.
    Last,
}

/// Pools hidden states over `span` (half-open position range).
pub fn pool_embedding(
    hidden: &[Vec<f64>],
    span: std::ops::Range<usize>,
    method: PoolMethod,
) -> Result<Embedding> {
    if span.is_empty() {
        return Err(Error::EmptySpan("pool_embedding span".into()));
    }
    if span.end > hidden.len() {
        return Err(Error::EmptySpan(format!(
            "span {}..{} out of bounds for {} positions",
            span.start,
            span.end,
            hidden.len()
        )));
    }
    match method {
        PoolMethod::Mean => {
            let d = hidden[span.start].len();
            let mut acc = vec![0.0; d];
            for t in span.clone() {
                math::add_assign(&mut acc, &hidden[t]);
            }
            let n = span.len() as f64;
            for v in acc.iter_mut() {
                *v /= n;
            }
            Ok(Embedding(acc))
        }
        PoolMethod::Last => Ok(Embedding(hidden[span.end - 1].clone())),
    }
}
