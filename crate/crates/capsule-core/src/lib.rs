//! Desk-scale prompt compression.
//!
//! Trains a small decoder-only language model (the *compressor*) to rewrite
//! long prompts into short natural-language *capsule prompts* under a hard
//! token budget. Training combines a semantic-preservation loss (MSE between
//! pooled hidden-state embeddings of the original prompt and the capsule)
//! with a detached utility reward computed by a frozen *scorer* model over
//! sampled downstream questions. Evaluation covers exact-match utility,
//! compression rate, API dollar cost, and batched inference latency against
//! token-dropping baselines.
//!
//! Module map:
//!
//! - [`textmodel`] — tokenizer, tiny causal transformer with explicit
//!   forward/backward, generation, checkpoints
//! - [`compression`] — instruction-conditioned capsule generation and the
//!   semantic-preservation loss
//! - [`reward`] — truncation gate and the utility-preservation reward
//! - [`trainer`] — combined objective, Adam, early-stopped training loop
//! - [`datasets`] — JSONL ingestion, few-shot assembly, splits, synthetic
//!   corpora
//! - [`baselines`] — zero-shot summarization, self-information pruning,
//!   random demonstration elimination
//! - [`eval`] — exact match, compression rate, cost model, latency bench

pub mod baselines;
pub mod compression;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod reward;
pub mod seed;
pub mod textmodel;
pub mod trainer;

pub use error::{Error, Result};
