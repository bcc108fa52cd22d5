//! Comparison compressors: zero-shot summarization with pretrained-only
//! weights, self-information word pruning over a frozen model, and random
//! whole-demonstration elimination.

use crate::compression::{summarize_generate, CompressionOpts, InstructionSet};
use crate::datasets::DEMO_SEPARATOR;
use crate::error::{Error, Result};
use crate::reward::{truncate, LengthBudget};
use crate::textmodel::math;
use crate::textmodel::model::{forward, DecodeStrategy};
use crate::textmodel::{ModelParams, TokenSequence, Unit};
use serde::{Deserialize, Serialize};

/// A prunable word unit: a contiguous token span with its surface form and
/// aggregated self-information score.
#[derive(Debug, Clone)]
pub struct PruneUnit {
    pub span: std::ops::Range<usize>,
    pub surface: String,
    pub score: f64,
}

/// How token scores combine into a unit score: summed self-information, or
/// the per-token mean (perplexity-style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitScore {
    #[default]
    SelfInfoSum,
    PerplexityMean,
}

/// Same mechanics as capsule generation, but on pretrained-only weights with
/// no reward loop; the output is hard-truncated to the budget.
pub fn zero_shot_summarize(
    model: &ModelParams,
    k: &TokenSequence,
    instr: &InstructionSet,
    budget: LengthBudget,
    opts: &CompressionOpts,
) -> Result<TokenSequence> {
    let gen = summarize_generate(
        model,
        k,
        instr,
        budget.max_tokens,
        DecodeStrategy::Greedy,
        opts,
    )?;
    Ok(truncate(&gen.capsule, budget))
}

/// Per-token self-information −log p(token | prefix) under the frozen
/// model. Position 0 has no prefix and is charged the uniform prior.
pub fn self_information(model: &ModelParams, k: &TokenSequence) -> Result<Vec<f64>> {
    let pass = forward(model, k)?;
    let v = model.vocab_size() as f64;
    let mut scores = Vec::with_capacity(k.len());
    for t in 0..k.len() {
        if t == 0 {
            scores.push(v.ln());
        } else {
            scores.push(-math::log_softmax_at(&pass.logits()[t - 1], k.ids[t] as usize));
        }
    }
    Ok(scores)
}

/// Groups tokens into word units at whitespace boundaries of the
/// detokenized text: each word token is a unit; consecutive character
/// fallback tokens merge into one unit.
pub fn word_units(model: &ModelParams, k: &TokenSequence) -> Vec<std::ops::Range<usize>> {
    let mut units = Vec::new();
    let mut start = None;
    for (t, &id) in k.ids.iter().enumerate() {
        let is_char = matches!(model.vocab.unit(id), Some(Unit::Char(_)));
        if is_char {
            if start.is_none() {
                start = Some(t);
            }
        } else {
            if let Some(s) = start.take() {
                units.push(s..t);
            }
            units.push(t..t + 1);
        }
    }
    if let Some(s) = start {
        units.push(s..k.len());
    }
    units
}

/// Scores every word unit of the prompt under the frozen model.
pub fn score_units(
    model: &ModelParams,
    k: &TokenSequence,
    scoring: UnitScore,
) -> Result<Vec<PruneUnit>> {
    if k.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    let token_scores = self_information(model, k)?;
    Ok(word_units(model, k)
        .into_iter()
        .map(|span| {
            let sum: f64 = token_scores[span.clone()].iter().sum();
            let score = match scoring {
                UnitScore::SelfInfoSum => sum,
                UnitScore::PerplexityMean => sum / span.len() as f64,
            };
            let surface = model
                .vocab
                .detokenize(&TokenSequence::new(k.ids[span.clone()].to_vec()));
            PruneUnit {
                span,
                surface,
                score,
            }
        })
        .collect())
}

/// Deletes the lowest self-information word units until the prompt fits the
/// budget; survivors keep their original order. Ties are broken by removing
/// the earliest position first. If a single unit remains and still exceeds
/// the budget it is cut to the budget.
pub fn selective_context(
    model: &ModelParams,
    k: &TokenSequence,
    budget: LengthBudget,
    scoring: UnitScore,
) -> Result<TokenSequence> {
    let units = score_units(model, k, scoring)?;
    let mut alive: Vec<bool> = vec![true; units.len()];
    let mut total = k.len();
    while total > budget.max_tokens && alive.iter().filter(|a| **a).count() > 1 {
        // lowest score wins removal; earliest position on ties
        let victim = units
            .iter()
            .enumerate()
            .filter(|(i, _)| alive[*i])
            .min_by(|(ai, a), (bi, b)| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(ai.cmp(bi))
            })
            .map(|(i, _)| i)
            .expect("at least one unit alive");
        alive[victim] = false;
        total -= units[victim].span.len();
    }
    let mut ids = Vec::with_capacity(total.min(budget.max_tokens));
    for (i, u) in units.iter().enumerate() {
        if alive[i] {
            ids.extend_from_slice(&k.ids[u.span.clone()]);
        }
    }
    Ok(truncate(&TokenSequence::new(ids), budget))
}

/// Removes uniformly chosen whole demonstration blocks until the prompt
/// fits the budget; at least one block always survives (cut to the budget
/// if it alone exceeds it).
pub fn random_drop(
    prompt: &str,
    model: &ModelParams,
    budget: LengthBudget,
    seed: u64,
) -> Result<TokenSequence> {
    let blocks: Vec<&str> = prompt
        .split(DEMO_SEPARATOR)
        .filter(|b| !b.trim().is_empty())
        .collect();
    if blocks.is_empty() {
        return Err(Error::UnparseableStructure(
            "prompt contains no demonstration blocks".into(),
        ));
    }
    let mut tokenized: Vec<TokenSequence> =
        blocks.iter().map(|b| model.vocab.tokenize(b)).collect();
    let mut total: usize = tokenized.iter().map(|t| t.len()).sum();
    let mut rng = crate::seed::rng_from(seed, "random-drop");
    while total > budget.max_tokens && tokenized.len() > 1 {
        let victim = rand::Rng::gen_range(&mut rng, 0..tokenized.len());
        total -= tokenized[victim].len();
        tokenized.remove(victim);
    }
    let mut ids = Vec::with_capacity(total);
    for t in &tokenized {
        ids.extend_from_slice(&t.ids);
    }
    Ok(truncate(&TokenSequence::new(ids), budget))
}
