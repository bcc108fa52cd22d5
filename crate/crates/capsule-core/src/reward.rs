//! Utility-preservation reward.
//!
//! A frozen scorer model answers sampled downstream questions once with the
//! truncated capsule as context and once with the original prompt; the
//! reward is the expected divergence between the two behaviours. Lower means
//! the capsule drives the scorer like the original did. The reward is
//! detached — it enters the training objective as a constant multiplier —
//! and is clamped to a positive floor so a perfect reward can never zero out
//! the semantic loss.

use crate::error::{Error, Result};
use crate::textmodel::model::{self, DecodeStrategy};
use crate::textmodel::{pool_embedding, ModelParams, PoolMethod, TokenSequence};
use serde::{Deserialize, Serialize};

/// Hard cap on capsule length before reward scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBudget {
    pub max_tokens: usize,
}

impl LengthBudget {
    pub fn new(max_tokens: usize) -> Self {
        LengthBudget {
            max_tokens: max_tokens.max(1),
        }
    }
}

/// Strict cut-off: the first `min(|c|, B)` tokens. Idempotent.
pub fn truncate(c: &TokenSequence, budget: LengthBudget) -> TokenSequence {
    TokenSequence::new(c.ids.iter().take(budget.max_tokens).copied().collect())
}

/// Questions sampled from the training split for one reward evaluation.
#[derive(Debug, Clone)]
pub struct QuestionSample {
    pub items: Vec<(TokenSequence, String)>,
}

impl QuestionSample {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Which divergence the scorer reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    /// MSE between mean-pooled final hidden states of the two contexts.
    #[default]
    HiddenMse,
    /// Disagreement rate between greedy short answers.
    ExactMatchDelta,
    /// Caller-supplied score; interface slot for external judge models.
    ExternalStub,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    #[serde(default)]
    pub metric: RewardMetric,
    pub sample_size: usize,
    pub budget: LengthBudget,
    pub r_min: f64,
    pub r_max: f64,
    /// Greedy decode cap for the exact-match metric.
    #[serde(default = "default_answer_tokens")]
    pub max_answer_tokens: usize,
}

fn default_answer_tokens() -> usize {
    16
}

impl RewardConfig {
    pub fn new(budget: LengthBudget) -> Self {
        RewardConfig {
            metric: RewardMetric::HiddenMse,
            sample_size: 4,
            budget,
            r_min: 0.01,
            r_max: 10.0,
            max_answer_tokens: default_answer_tokens(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min <= self.r_max) {
            return Err(Error::ConfigInvalid(format!(
                "reward clamp requires 0 < r_min ≤ r_max, got ({}, {})",
                self.r_min, self.r_max
            )));
        }
        if self.sample_size == 0 {
            return Err(Error::ConfigInvalid("sample_size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, raw: f64) -> f64 {
        raw.clamp(self.r_min, self.r_max)
    }
}

/// The reward value with its per-question components. `value` is the mean
/// of `per_question` clamped into `[r_min, r_max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardScore {
    pub value: f64,
    pub raw: f64,
    pub per_question: Vec<f64>,
}

/// Uniform sample without replacement from `(question, answer)` pairs of the
/// split; seeded and reproducible.
pub fn sample_questions(
    split: &[crate::datasets::QATriple],
    vocab: &crate::textmodel::Vocabulary,
    n: usize,
    seed: u64,
) -> Result<QuestionSample> {
    if split.len() < n || n == 0 {
        return Err(Error::InsufficientData {
            needed: n.max(1),
            have: split.len(),
        });
    }
    let mut rng = crate::seed::rng_from(seed, "question-sample");
    let mut idx: Vec<usize> = (0..split.len()).collect();
    // Fisher-Yates, then take the first n
    for i in (1..idx.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    let items = idx[..n]
        .iter()
        .map(|&i| {
            (
                vocab.tokenize(&split[i].question),
                split[i].answer.clone(),
            )
        })
        .collect();
    Ok(QuestionSample { items })
}

/// Scores how differently the frozen scorer behaves on (Φ(C) ⊕ Q) versus
/// (K ⊕ Q), averaged over the sampled questions and clamped. No gradient
/// flows anywhere; the scorer is read-only.
pub fn reward_score(
    scorer: &ModelParams,
    k: &TokenSequence,
    c: &TokenSequence,
    questions: &QuestionSample,
    cfg: &RewardConfig,
) -> Result<RewardScore> {
    cfg.validate()?;
    if questions.is_empty() {
        return Err(Error::EmptyQuestionSample);
    }
    let capped = truncate(c, cfg.budget);
    let mut per_question = Vec::with_capacity(questions.len());
    for (q, gold) in &questions.items {
        let with_capsule = capped.concat(q);
        let with_original = k.concat(q);
        let score = match cfg.metric {
            RewardMetric::HiddenMse => {
                hidden_mse(scorer, &with_capsule, &with_original)?
            }
            RewardMetric::ExactMatchDelta => {
                let a = greedy_answer(scorer, &with_capsule, cfg.max_answer_tokens)?;
                let b = greedy_answer(scorer, &with_original, cfg.max_answer_tokens)?;
                let _ = gold; // reference answers are used by eval, not here
                if crate::eval::normalize_answer(&a) == crate::eval::normalize_answer(&b) {
                    0.0
                } else {
                    1.0
                }
            }
            RewardMetric::ExternalStub => {
                return Err(Error::ConfigInvalid(
                    "external_stub reward requires reward_score_with; no client is bundled"
                        .into(),
                ))
            }
        };
        per_question.push(score);
    }
    let raw = per_question.iter().sum::<f64>() / per_question.len() as f64;
    Ok(RewardScore {
        value: cfg.clamp(raw),
        raw,
        per_question,
    })
}

/// External-stub entry point: the caller supplies per-question scores (for
/// example from an API-based judge); clamping and aggregation stay here.
pub fn reward_score_with(per_question: Vec<f64>, cfg: &RewardConfig) -> Result<RewardScore> {
    cfg.validate()?;
    if per_question.is_empty() {
        return Err(Error::EmptyQuestionSample);
    }
    let raw = per_question.iter().sum::<f64>() / per_question.len() as f64;
    Ok(RewardScore {
        value: cfg.clamp(raw),
        raw,
        per_question,
    })
}

/// MSE between mean-pooled final hidden states of two contexts under the
/// frozen scorer (full-concatenation pooling).
fn hidden_mse(scorer: &ModelParams, a: &TokenSequence, b: &TokenSequence) -> Result<f64> {
    let pa = model::forward(scorer, a)?;
    let pb = model::forward(scorer, b)?;
    let ea = pool_embedding(pa.hidden(), 0..a.len(), PoolMethod::Mean)?;
    let eb = pool_embedding(pb.hidden(), 0..b.len(), PoolMethod::Mean)?;
    crate::compression::semantic_loss(&ea, &eb, crate::compression::Distance::Mse)
}

fn greedy_answer(scorer: &ModelParams, prompt: &TokenSequence, max_tokens: usize) -> Result<String> {
    let out = model::generate(scorer, prompt, max_tokens, DecodeStrategy::Greedy)?;
    Ok(scorer.vocab.detokenize(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::QATriple;
    use crate::textmodel::{ModelConfig, Vocabulary};

    fn scorer() -> ModelParams {
        let vocab = Vocabulary::build(&[
            "what is three plus four seven two five the answer final",
        ]);
        ModelParams::init(
            ModelConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                context_window: 96,
                seed: 13,
            },
            vocab,
        )
        .unwrap()
        .frozen_clone()
    }

    fn sample(scorer: &ModelParams) -> QuestionSample {
        QuestionSample {
            items: vec![
                (scorer.vocab.tokenize("what is three plus four"), "seven".into()),
                (scorer.vocab.tokenize("what is two plus five"), "seven".into()),
            ],
        }
    }

    #[test]
    fn truncate_under_budget_is_identity() {
        let c = TokenSequence::new((0..10).collect());
        assert_eq!(truncate(&c, LengthBudget::new(150)), c);
    }

    #[test]
    fn truncate_cuts_to_budget() {
        let c = TokenSequence::new((0..200).collect());
        let t = truncate(&c, LengthBudget::new(150));
        assert_eq!(t.len(), 150);
        assert_eq!(t.ids[..], c.ids[..150]);
    }

    #[test]
    fn truncate_is_idempotent_on_random_inputs() {
        let mut rng = crate::seed::rng_from(2, "trunc");
        for _ in 0..1000 {
            let n = rand::Rng::gen_range(&mut rng, 0..50);
            let b = LengthBudget::new(rand::Rng::gen_range(&mut rng, 1..40));
            let c = TokenSequence::new((0..n).collect());
            let once = truncate(&c, b);
            assert!(once.len() <= b.max_tokens);
            assert_eq!(truncate(&once, b), once);
        }
    }

    #[test]
    fn identical_contexts_hit_clamp_floor() {
        let s = scorer();
        let k = s.vocab.tokenize("three plus four is seven the answer is seven");
        let cfg = RewardConfig::new(LengthBudget::new(k.len() + 10));
        let score = reward_score(&s, &k, &k, &sample(&s), &cfg).unwrap();
        assert_eq!(score.raw, 0.0, "identical inputs give identical states");
        assert_eq!(score.value, cfg.r_min);
    }

    #[test]
    fn mean_then_clamp_arithmetic() {
        let cfg = RewardConfig {
            metric: RewardMetric::ExternalStub,
            sample_size: 2,
            budget: LengthBudget::new(8),
            r_min: 0.01,
            r_max: 10.0,
            max_answer_tokens: 16,
        };
        let s = reward_score_with(vec![0.2, 0.4], &cfg).unwrap();
        assert!((s.value - 0.3).abs() < 1e-12);
        assert_eq!(s.per_question, vec![0.2, 0.4]);
        // clamping at both ends
        assert_eq!(reward_score_with(vec![0.0], &cfg).unwrap().value, 0.01);
        assert_eq!(reward_score_with(vec![99.0], &cfg).unwrap().value, 10.0);
    }

    #[test]
    fn hidden_mse_matches_two_pass_loop_oracle() {
        let s = scorer();
        let k = s.vocab.tokenize("three plus four is seven");
        let c = s.vocab.tokenize("seven");
        let cfg = RewardConfig::new(LengthBudget::new(4));
        let score = reward_score(&s, &k, &c, &sample(&s), &cfg).unwrap();
        // oracle: two independent forward passes and a component loop
        let capped = truncate(&c, cfg.budget);
        for (i, (q, _)) in sample(&s).items.iter().enumerate() {
            let a = capped.concat(q);
            let b = k.concat(q);
            let pa = model::forward(&s, &a).unwrap();
            let pb = model::forward(&s, &b).unwrap();
            let d = s.config.d_model;
            let mut ea = vec![0.0; d];
            let mut eb = vec![0.0; d];
            for h in pa.hidden() {
                for (x, y) in ea.iter_mut().zip(h) {
                    *x += y;
                }
            }
            for h in pb.hidden() {
                for (x, y) in eb.iter_mut().zip(h) {
                    *x += y;
                }
            }
            let mut mse = 0.0;
            for j in 0..d {
                let da = ea[j] / a.len() as f64 - eb[j] / b.len() as f64;
                mse += da * da;
            }
            mse /= d as f64;
            assert!(
                (score.per_question[i] - mse).abs() < 1e-9,
                "question {i}: {} vs oracle {mse}",
                score.per_question[i]
            );
        }
    }

    #[test]
    fn scorer_weights_untouched_by_scoring() {
        let s = scorer();
        let before = s.weights_fingerprint();
        let k = s.vocab.tokenize("three plus four is seven");
        let c = s.vocab.tokenize("seven plus");
        let cfg = RewardConfig::new(LengthBudget::new(2));
        for _ in 0..10 {
            reward_score(&s, &k, &c, &sample(&s), &cfg).unwrap();
        }
        assert_eq!(s.weights_fingerprint(), before);
    }

    #[test]
    fn empty_question_sample_is_an_error() {
        let s = scorer();
        let k = s.vocab.tokenize("three");
        let cfg = RewardConfig::new(LengthBudget::new(2));
        let empty = QuestionSample { items: vec![] };
        assert!(matches!(
            reward_score(&s, &k, &k, &empty, &cfg),
            Err(Error::EmptyQuestionSample)
        ));
    }

    #[test]
    fn empty_capsule_scores_worse_than_prefixes() {
        // direction check on a fixed toy scorer: once token semantics exist
        // (a short LM pretraining pass), sharing a prefix of K must score at
        // least as well as sharing nothing
        let text = "three plus four is seven the answer is seven";
        let mut s = scorer();
        s.frozen = false;
        let sample_seq = s
            .vocab
            .tokenize(text)
            .concat(&TokenSequence::new(vec![s.vocab.eos_id]));
        crate::trainer::pretrain_loop(
            &mut s,
            &[crate::trainer::PretrainSample::full(sample_seq)],
            &crate::trainer::PretrainConfig {
                steps: 150,
                learning_rate: 3e-3,
                grad_clip_norm: 1.0,
                seed: 4,
                final_lr_fraction: 0.1,
            },
        )
        .unwrap();
        let s = s.frozen_clone();
        let k = s.vocab.tokenize(text);
        let qs = sample(&s);
        let cfg = RewardConfig::new(LengthBudget::new(k.len()));
        // an empty capsule makes (Φ(C) ⊕ Q) = Q, which still scores
        let empty = reward_score(&s, &k, &TokenSequence::default(), &qs, &cfg).unwrap();
        for cut in 1..=k.len() {
            let prefix = TokenSequence::new(k.ids[..cut].to_vec());
            let sc = reward_score(&s, &k, &prefix, &qs, &cfg).unwrap();
            assert!(
                empty.raw >= sc.raw - 1e-12,
                "prefix of {cut} tokens scored {} vs empty {}",
                sc.raw,
                empty.raw
            );
        }
    }

    #[test]
    fn sampling_is_seeded_uniform_without_replacement() {
        let vocab = Vocabulary::from_words(&["q", "a"]);
        let split: Vec<QATriple> = (0..10)
            .map(|i| QATriple {
                id: format!("t{i}"),
                prompt: "q".into(),
                question: format!("q {i}"),
                answer: format!("a {i}"),
            })
            .collect();
        let a = sample_questions(&split, &vocab, 4, 7).unwrap();
        let b = sample_questions(&split, &vocab, 4, 7).unwrap();
        assert_eq!(
            a.items.iter().map(|x| &x.1).collect::<Vec<_>>(),
            b.items.iter().map(|x| &x.1).collect::<Vec<_>>()
        );
        // whole split requested: a permutation, no repeats
        let full = sample_questions(&split, &vocab, 10, 3).unwrap();
        let mut answers: Vec<&String> = full.items.iter().map(|x| &x.1).collect();
        answers.sort();
        answers.dedup();
        assert_eq!(answers.len(), 10);
        // insufficient data
        assert!(sample_questions(&split, &vocab, 11, 0).is_err());
    }

    #[test]
    fn sampling_frequencies_are_uniform_within_3_sigma() {
        let vocab = Vocabulary::from_words(&["q", "a"]);
        let split: Vec<QATriple> = (0..10)
            .map(|i| QATriple {
                id: format!("t{i}"),
                prompt: "q".into(),
                question: format!("q {i}"),
                answer: format!("{i}"),
            })
            .collect();
        let n = 3;
        let resamples = 10_000;
        let mut counts = vec![0usize; 10];
        for r in 0..resamples {
            let s = sample_questions(&split, &vocab, n, 90_000 + r).unwrap();
            for (_, ans) in &s.items {
                counts[ans.parse::<usize>().unwrap()] += 1;
            }
        }
        let p = n as f64 / 10.0;
        let mean = resamples as f64 * p;
        let sigma = (resamples as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "item {i} drawn {c} times, expected {mean:.0} ± {:.0}",
                3.0 * sigma
            );
        }
    }
}
