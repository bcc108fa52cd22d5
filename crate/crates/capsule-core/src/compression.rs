//! Natural-language prompt compression.
//!
//! The compressor embeds the original prompt under a replicating instruction
//! (producing the constant target `e_K`), generates the capsule under a
//! summarizing instruction carrying the token budget, and is trained to
//! minimize a distance between `e_K` and the capsule embedding `e_C`.
//!
//! Token sampling is discrete, so gradients flow through the hidden states
//! of a forward pass evaluated on the sampled capsule tokens (self-
//! conditioned teacher forcing); `e_K` is detached so the target side cannot
//! collapse toward the prediction.

use crate::error::{Error, Result};
use crate::textmodel::math;
use crate::textmodel::model::{self, DecodeStrategy, Gradients};
use crate::textmodel::{pool_embedding, Embedding, ModelParams, PoolMethod, TokenSequence};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Replicating and summarizing instructions. The summarizing instruction
/// carries exactly one budget placeholder, substituted per call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionSet {
    pub t_rep: String,
    pub t_summ: String,
    #[serde(default = "default_slot")]
    pub word_count_slot: String,
}

fn default_slot() -> String {
    "{word count}".to_string()
}

impl InstructionSet {
    /// Default instructions for few-shot demonstration prompts.
    pub fn fewshot_default() -> Self {
        InstructionSet {
            t_rep: "Repeat the following main input.".into(),
            t_summ: "Please summarize each question-answer pair in one sentence within less \
                     than {word count} words. Make sure not to repeat the input question-answer \
                     pair."
                .into(),
            word_count_slot: default_slot(),
        }
    }

    /// Default instructions for reading-comprehension passages.
    pub fn reading_default() -> Self {
        InstructionSet {
            t_rep: "Repeat the following main input.".into(),
            t_summ: "Please summarize the passage within less than {word count} words. Make \
                     sure not to repeat the passage."
                .into(),
            word_count_slot: default_slot(),
        }
    }

    /// Loads a template file: JSON with fields `t_rep`, `t_summ`, optional
    /// `word_count_slot`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let set: InstructionSet = serde_json::from_slice(&bytes)?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_rep.trim().is_empty() || self.t_summ.trim().is_empty() {
            return Err(Error::ConfigInvalid("instructions must be nonempty".into()));
        }
        if self.t_summ.matches(self.word_count_slot.as_str()).count() != 1 {
            return Err(Error::ConfigInvalid(format!(
                "t_summ must contain exactly one {:?} placeholder",
                self.word_count_slot
            )));
        }
        Ok(())
    }

    /// The summarizing instruction with the budget substituted in.
    pub fn summ_with_budget(&self, budget: usize) -> String {
        self.t_summ
            .replace(self.word_count_slot.as_str(), &budget.to_string())
    }
}

/// Distance between pooled embeddings; pluggable, MSE by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Mse,
    Cosine,
}

/// Where the capsule embedding comes from: pooled during generation, or via
/// a second encoding pass over the finished capsule. The two agree bit-for-
/// bit here because decode and full forward share per-position code; the
/// second pass is the default because it is the path the trainer
/// differentiates through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedSource {
    #[default]
    SecondPass,
    Generation,
}

/// Knobs shared by the compression operations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionOpts {
    pub pool: PoolMethod,
    #[serde(default)]
    pub dist: Distance,
    #[serde(default)]
    pub embed_source: EmbedSource,
    /// Generation headroom as a multiple of the budget; the hard cut to the
    /// budget itself is the reward module's job.
    pub gen_headroom_factor: usize,
}

impl Default for CompressionOpts {
    fn default() -> Self {
        CompressionOpts {
            pool: PoolMethod::Mean,
            dist: Distance::Mse,
            embed_source: EmbedSource::SecondPass,
            gen_headroom_factor: 2,
        }
    }
}

/// A generated capsule. `e_c` is absent exactly when the model emitted eos
/// immediately; callers treat that as a flagged skip, not a crash.
#[derive(Debug, Clone)]
pub struct GeneratedCapsule {
    pub capsule: TokenSequence,
    pub e_c: Option<Embedding>,
}

impl GeneratedCapsule {
    pub fn is_empty(&self) -> bool {
        self.capsule.is_empty()
    }
}

/// Capsule plus both embeddings and their semantic loss.
#[derive(Debug, Clone)]
pub struct CapsuleResult {
    pub capsule: TokenSequence,
    pub e_k: Embedding,
    pub e_c: Embedding,
    pub semantic_loss: f64,
}

/// Embeds the original prompt under the replicating instruction: forward
/// over (t_rep ⊕ k), pooled over k's span. The result is a constant target —
/// no gradient is ever propagated through this pass.
pub fn replicate_embed(
    compressor: &ModelParams,
    k: &TokenSequence,
    instr: &InstructionSet,
    pool: PoolMethod,
) -> Result<Embedding> {
    let ctx = compressor.vocab.tokenize(&instr.t_rep).concat(k);
    let window = compressor.config.context_window;
    if ctx.len() > window {
        return Err(Error::ContextOverflow {
            prompt: ctx.len(),
            requested: 0,
            window,
        });
    }
    let pass = model::forward(compressor, &ctx)?;
    let span = ctx.len() - k.len()..ctx.len();
    pool_embedding(pass.hidden(), span, pool)
}

/// Generates the capsule conditioned on (t_summ-with-budget ⊕ k) and pools
/// its embedding. Generation stops at eos or at the headroom limit.
pub fn summarize_generate(
    compressor: &ModelParams,
    k: &TokenSequence,
    instr: &InstructionSet,
    budget: usize,
    strategy: DecodeStrategy,
    opts: &CompressionOpts,
) -> Result<GeneratedCapsule> {
    let ctx = summarize_context(compressor, k, instr, budget);
    let window = compressor.config.context_window;
    if ctx.len() >= window {
        return Err(Error::ContextOverflow {
            prompt: ctx.len(),
            requested: 1,
            window,
        });
    }
    let headroom = window - ctx.len();
    let max_new = (opts.gen_headroom_factor.max(1) * budget.max(1)).min(headroom);
    let capsule = model::generate(compressor, &ctx, max_new, strategy)?;
    if capsule.is_empty() {
        return Ok(GeneratedCapsule { capsule, e_c: None });
    }
    let e_c = match opts.embed_source {
        EmbedSource::SecondPass => {
            let full = ctx.concat(&capsule);
            let pass = model::forward(compressor, &full)?;
            pool_embedding(pass.hidden(), ctx.len()..full.len(), opts.pool)?
        }
        EmbedSource::Generation => {
            let mut dec = model::Decoder::new(compressor);
            for &id in &ctx.ids {
                dec.feed(id)?;
            }
            let mut hidden = Vec::with_capacity(capsule.len());
            for &id in &capsule.ids {
                dec.feed(id)?;
                hidden.push(dec.hidden().to_vec());
            }
            pool_embedding(&hidden, 0..hidden.len(), opts.pool)?
        }
    };
    Ok(GeneratedCapsule {
        capsule,
        e_c: Some(e_c),
    })
}

fn summarize_context(
    compressor: &ModelParams,
    k: &TokenSequence,
    instr: &InstructionSet,
    budget: usize,
) -> TokenSequence {
    compressor
        .vocab
        .tokenize(&instr.summ_with_budget(budget))
        .concat(k)
}

/// Distance between the two pooled embeddings; ≥ 0, symmetric for MSE.
pub fn semantic_loss(e_k: &Embedding, e_c: &Embedding, dist: Distance) -> Result<f64> {
    if e_k.dim() != e_c.dim() {
        return Err(Error::DimensionMismatch {
            left: e_k.dim(),
            right: e_c.dim(),
        });
    }
    match dist {
        Distance::Mse => {
            let d = e_k.dim() as f64;
            Ok(e_k
                .0
                .iter()
                .zip(&e_c.0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d)
        }
        Distance::Cosine => {
            let na = norm(&e_k.0);
            let nb = norm(&e_c.0);
            if na == 0.0 || nb == 0.0 {
                return Ok(1.0);
            }
            let cos = math::dot(&e_k.0, &e_c.0) / (na * nb);
            Ok(1.0 - cos)
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist_grad_wrt_ec(e_k: &Embedding, e_c: &Embedding, dist: Distance) -> Vec<f64> {
    match dist {
        Distance::Mse => {
            let d = e_k.dim() as f64;
            e_k.0
                .iter()
                .zip(&e_c.0)
                .map(|(a, b)| 2.0 * (b - a) / d)
                .collect()
        }
        Distance::Cosine => {
            let na = norm(&e_k.0);
            let nb = norm(&e_c.0);
            if na == 0.0 || nb == 0.0 {
                return vec![0.0; e_c.dim()];
            }
            let dot = math::dot(&e_k.0, &e_c.0);
            e_k.0
                .iter()
                .zip(&e_c.0)
                .map(|(a, b)| -(a / (na * nb) - dot * b / (na * nb * nb * nb)))
                .collect()
        }
    }
}

/// Differentiable side of the semantic loss: re-encodes the fixed capsule
/// token sequence under the summarization context, pools `e_C`, and
/// accumulates `multiplier × ∂loss/∂θ` into `grads` (gradients flow through
/// `e_C` only; `e_k` is a constant). Returns the unweighted semantic loss.
#[allow(clippy::too_many_arguments)]
pub fn semantic_loss_grad(
    compressor: &ModelParams,
    k: &TokenSequence,
    capsule: &TokenSequence,
    instr: &InstructionSet,
    budget: usize,
    e_k: &Embedding,
    opts: &CompressionOpts,
    multiplier: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if capsule.is_empty() {
        return Err(Error::EmptySpan("capsule".into()));
    }
    let ctx = summarize_context(compressor, k, instr, budget);
    let full = ctx.concat(capsule);
    let pass = model::forward(compressor, &full)?;
    let span = ctx.len()..full.len();
    let e_c = pool_embedding(pass.hidden(), span.clone(), opts.pool)?;
    let loss = semantic_loss(e_k, &e_c, opts.dist)?;

    let d_ec: Vec<f64> = dist_grad_wrt_ec(e_k, &e_c, opts.dist)
        .into_iter()
        .map(|g| g * multiplier)
        .collect();
    let d = compressor.config.d_model;
    let mut d_hidden = vec![vec![0.0; d]; full.len()];
    match opts.pool {
        PoolMethod::Mean => {
            let n = span.len() as f64;
            for t in span {
                for i in 0..d {
                    d_hidden[t][i] = d_ec[i] / n;
                }
            }
        }
        PoolMethod::Last => {
            d_hidden[span.end - 1] = d_ec;
        }
    }
    pass.backward(compressor, None, Some(&d_hidden), grads);
    Ok(loss)
}

/// Convenience wrapper producing a full [`CapsuleResult`]; `None` when the
/// model emitted eos immediately.
pub fn compress(
    compressor: &ModelParams,
    k: &TokenSequence,
    instr: &InstructionSet,
    budget: usize,
    strategy: DecodeStrategy,
    opts: &CompressionOpts,
) -> Result<Option<CapsuleResult>> {
    let generated = summarize_generate(compressor, k, instr, budget, strategy, opts)?;
    let e_c = match generated.e_c {
        Some(e) => e,
        None => return Ok(None),
    };
    let e_k = replicate_embed(compressor, k, instr, opts.pool)?;
    let loss = semantic_loss(&e_k, &e_c, opts.dist)?;
    Ok(Some(CapsuleResult {
        capsule: generated.capsule,
        e_k,
        e_c,
        semantic_loss: loss,
    }))
}
