//! Training: the combined objective (semantic loss × detached reward), the
//! per-triple step, the early-stopped loop, and the LM pretraining phase
//! that stands in for a pretrained initialization at desk scale.

use crate::compression::{
    replicate_embed, semantic_loss_grad, summarize_generate, CompressionOpts, InstructionSet,
};
use crate::datasets::{crude_extract, qa_prompt, QATriple, Splits};
use crate::error::{Error, Result};
use crate::reward::{
    reward_score, sample_questions, LengthBudget, QuestionSample, RewardConfig, RewardScore,
};
use crate::seed;
use crate::textmodel::model::{forward, lm_loss_grad_masked, DecodeStrategy, Gradients};
use crate::textmodel::{ModelParams, TokenSequence};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Desk-scale training configuration. `paper_preset` carries the full-scale
/// learning rate and clip published for 7B-parameter fine-tuning; tiny
/// models need larger steps, so the defaults differ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub max_steps: usize,
    pub patience: usize,
    pub budget: LengthBudget,
    pub reward_cfg: RewardConfig,
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default = "default_true")]
    pub use_reward: bool,
    #[serde(default)]
    pub compression: CompressionOpts,
    #[serde(default = "default_strategy")]
    pub strategy: DecodeStrategy,
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_strategy() -> DecodeStrategy {
    DecodeStrategy::Greedy
}

impl TrainConfig {
    pub fn desk_default(budget: LengthBudget, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            grad_clip_norm: 1.0,
            max_steps: 400,
            patience: 3,
            budget,
            reward_cfg: RewardConfig::new(budget),
            seed,
            eval_every: 25,
            grad_accum: 1,
            use_reward: true,
            compression: CompressionOpts::default(),
            strategy: DecodeStrategy::Greedy,
        }
    }

    /// Published full-scale values (learning rate 5e-6, clip 0.8); selectable
    /// but far too timid for models this small.
    pub fn paper_preset(budget: LengthBudget, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            grad_clip_norm: 0.8,
            ..Self::desk_default(budget, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.grad_clip_norm <= 0.0 || self.patience == 0 {
            return Err(Error::ConfigInvalid(
                "need learning_rate ≥ 0, grad_clip_norm > 0, patience ≥ 1".into(),
            ));
        }
        if self.eval_every == 0 || self.grad_accum == 0 {
            return Err(Error::ConfigInvalid(
                "eval_every and grad_accum must be ≥ 1".into(),
            ));
        }
        self.reward_cfg.validate()
    }
}

/// Loop progress; `steps_since_improvement` counts evaluations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub best_val_loss: f64,
    pub steps_since_improvement: usize,
    pub seed: u64,
}

/// The combined objective: differentiable semantic loss scaled by the
/// detached, clamped reward. Low-quality capsules (high reward value) are
/// multiplied into a high penalty.
pub fn nano_loss(semantic: f64, reward: &RewardScore) -> f64 {
    semantic * reward.value
}

/// Adam with bias correction; state keyed like the weights.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zero = |p: &ModelParams| -> BTreeMap<String, Vec<f64>> {
            p.weights
                .iter()
                .map(|(k, m)| (k.clone(), vec![0.0; m.len()]))
                .collect()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zero(params),
            v: zero(params),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if params.frozen {
            return Err(Error::ConfigInvalid(
                "refusing to update frozen parameters".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, w) in params.weights.iter_mut() {
            let g = &grads.mats[name].data;
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for i in 0..w.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-step record; serialized as one JSONL line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub semantic_loss: f64,
    pub reward: f64,
    pub nano_loss: f64,
    pub capsule_length: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<StepMetrics>,
    pub best_step: usize,
    pub best_val_loss: f64,
}

impl TrainLog {
    /// Newline-delimited JSON, one record per executed step.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// One training step on one triple: generate the capsule, sample questions,
/// score the reward, backpropagate reward × semantic loss, clip, update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    compressor: &mut ModelParams,
    scorer: &ModelParams,
    triple: &QATriple,
    train_split: &[QATriple],
    instr: &InstructionSet,
    cfg: &TrainConfig,
    opt: &mut Adam,
    step: usize,
) -> Result<StepMetrics> {
    let mut grads = Gradients::zeros_like(compressor);
    let metrics = accumulate_step(compressor, scorer, triple, train_split, instr, cfg, step, &mut grads)?;
    if metrics.skipped.is_none() {
        grads.clip_to_norm(cfg.grad_clip_norm);
        opt.step(compressor, &grads)?;
    }
    Ok(metrics)
}

/// Computes losses and accumulates gradients without touching the weights.
#[allow(clippy::too_many_arguments)]
fn accumulate_step(
    compressor: &ModelParams,
    scorer: &ModelParams,
    triple: &QATriple,
    train_split: &[QATriple],
    instr: &InstructionSet,
    cfg: &TrainConfig,
    step: usize,
    grads: &mut Gradients,
) -> Result<StepMetrics> {
    if !scorer.frozen {
        return Err(Error::ConfigInvalid("scorer must be frozen".into()));
    }
    let budget = cfg.budget.max_tokens;
    let k = compressor.vocab.tokenize(&triple.prompt);
    let gen = summarize_generate(
        compressor,
        &k,
        instr,
        budget,
        cfg.strategy,
        &cfg.compression,
    )?;
    if gen.is_empty() {
        return Ok(StepMetrics {
            step,
            semantic_loss: f64::NAN,
            reward: f64::NAN,
            nano_loss: f64::NAN,
            capsule_length: 0,
            val_loss: None,
            skipped: Some("empty-generation".into()),
        });
    }
    let capsule = gen.capsule;
    let e_k = replicate_embed(compressor, &k, instr, cfg.compression.pool)?;
    let reward = if cfg.use_reward {
        let questions = sample_questions(
            train_split,
            &scorer.vocab,
            cfg.reward_cfg.sample_size,
            seed::derive_seed_indexed(cfg.seed, "step-questions", step as u64),
        )?;
        reward_score(scorer, &k, &capsule, &questions, &cfg.reward_cfg)?
    } else {
        // ablation: reward forced to a constant
        RewardScore {
            value: 1.0,
            raw: 1.0,
            per_question: Vec::new(),
        }
    };
    let mut local = Gradients::zeros_like(compressor);
    let semantic = semantic_loss_grad(
        compressor,
        &k,
        &capsule,
        instr,
        budget,
        &e_k,
        &cfg.compression,
        reward.value,
        &mut local,
    )?;
    let nano = nano_loss(semantic, &reward);
    if !nano.is_finite() || !local.all_finite() {
        return Ok(StepMetrics {
            step,
            semantic_loss: semantic,
            reward: reward.value,
            nano_loss: nano,
            capsule_length: capsule.len(),
            val_loss: None,
            skipped: Some("non-finite-loss".into()),
        });
    }
    for (name, m) in grads.mats.iter_mut() {
        crate::textmodel::math::add_assign(&mut m.data, &local.mats[name].data);
    }
    Ok(StepMetrics {
        step,
        semantic_loss: semantic,
        reward: reward.value,
        nano_loss: nano,
        capsule_length: capsule.len(),
        val_loss: None,
        skipped: None,
    })
}

/// Validation nano loss over held-out triples with a fixed question sample;
/// greedy decoding. Empty generations are skipped; if every capsule is
/// empty the loss is +inf (never an improvement).
pub fn validation_loss(
    compressor: &ModelParams,
    scorer: &ModelParams,
    val: &[QATriple],
    instr: &InstructionSet,
    cfg: &TrainConfig,
    questions: &QuestionSample,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for triple in val {
        let k = compressor.vocab.tokenize(&triple.prompt);
        let gen = summarize_generate(
            compressor,
            &k,
            instr,
            cfg.budget.max_tokens,
            DecodeStrategy::Greedy,
            &cfg.compression,
        )?;
        let (capsule, e_c) = match (gen.capsule, gen.e_c) {
            (c, Some(e)) => (c, e),
            _ => continue,
        };
        let e_k = replicate_embed(compressor, &k, instr, cfg.compression.pool)?;
        let semantic = crate::compression::semantic_loss(&e_k, &e_c, cfg.compression.dist)?;
        let reward = if cfg.use_reward {
            reward_score(scorer, &k, &capsule, questions, &cfg.reward_cfg)?
        } else {
            RewardScore {
                value: 1.0,
                raw: 1.0,
                per_question: Vec::new(),
            }
        };
        total += nano_loss(semantic, &reward);
        n += 1;
    }
    Ok(if n == 0 { f64::INFINITY } else { total / n as f64 })
}

/// Early-stopped training over shuffled triples. Returns the checkpoint
/// with the best validation loss and a step-indexed log.
pub fn train_loop(
    compressor: ModelParams,
    scorer: &ModelParams,
    splits: &Splits,
    instr: &InstructionSet,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::EmptyDataset("train or validation split".into()));
    }
    let mut params = compressor;
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let mut log = TrainLog::default();
    let mut state = TrainState {
        step: 0,
        best_val_loss: f64::INFINITY,
        steps_since_improvement: 0,
        seed: cfg.seed,
    };
    let val_questions = sample_questions(
        &splits.train,
        &scorer.vocab,
        cfg.reward_cfg.sample_size.min(splits.train.len()),
        seed::derive_seed(cfg.seed, "val-questions"),
    )?;
    let mut best = params.clone();
    let mut acc = Gradients::zeros_like(&params);
    let mut accumulated = 0usize;
    let mut order: Vec<usize> = Vec::new();

    for step in 1..=cfg.max_steps {
        state.step = step;
        // epoch-wise reshuffle
        let pos = (step - 1) % splits.train.len();
        if pos == 0 {
            let epoch = (step - 1) / splits.train.len();
            order = shuffled_indices(
                splits.train.len(),
                seed::derive_seed_indexed(cfg.seed, "epoch-shuffle", epoch as u64),
            );
        }
        let triple = &splits.train[order[pos]];
        let mut metrics =
            accumulate_step(&params, scorer, triple, &splits.train, instr, cfg, step, &mut acc)?;
        if metrics.skipped.is_none() {
            accumulated += 1;
        }
        if accumulated >= cfg.grad_accum {
            acc.scale(1.0 / accumulated as f64);
            acc.clip_to_norm(cfg.grad_clip_norm);
            opt.step(&mut params, &acc)?;
            acc.zero();
            accumulated = 0;
        }
        // evaluate at the very first step (baseline) and on schedule
        if step == 1 || step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val =
                validation_loss(&params, scorer, &splits.val, instr, cfg, &val_questions)?;
            metrics.val_loss = Some(val);
            if val < state.best_val_loss {
                state.best_val_loss = val;
                state.steps_since_improvement = 0;
                log.best_step = step;
                log.best_val_loss = val;
                best = params.clone();
            } else {
                state.steps_since_improvement += 1;
            }
            log.records.push(metrics);
            if state.steps_since_improvement >= cfg.patience {
                break;
            }
        } else {
            log.records.push(metrics);
        }
    }
    Ok((best, log))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    use rand::SeedableRng;
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Configuration for the LM pretraining phase. The learning rate decays
/// linearly to `final_lr_fraction × learning_rate` over the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
}

fn default_final_lr_fraction() -> f64 {
    0.1
}

impl PretrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        PretrainConfig {
            steps: 1500,
            learning_rate: 1e-3,
            grad_clip_norm: 1.0,
            seed,
            final_lr_fraction: default_final_lr_fraction(),
        }
    }
}

/// One pretraining sample: token sequence plus the position its LM loss
/// starts from (completion masking).
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub tokens: TokenSequence,
    pub loss_from: usize,
}

impl PretrainSample {
    /// Plain LM sample: loss over every prediction.
    pub fn full(tokens: TokenSequence) -> Self {
        PretrainSample {
            tokens,
            loss_from: 0,
        }
    }

    /// Prompt/completion sample: loss over the completion only.
    pub fn completion(prompt: TokenSequence, completion: TokenSequence) -> Self {
        let loss_from = prompt.len();
        PretrainSample {
            tokens: prompt.concat(&completion),
            loss_from,
        }
    }
}

/// Builds the pretraining sample mixture from training triples: answering
/// over the full prompt, over a crude extractive summary, and over the
/// single answer-bearing fact sentence (a short-context rung that makes the
/// copying skill learnable), plus replication and summarization toward the
/// crude summary. Answer and summary samples are completion-masked so
/// their entire gradient trains the skill; replication samples keep the
/// full LM loss to build context representations.
pub fn build_pretrain_samples(
    train: &[QATriple],
    params: &ModelParams,
    instr: &InstructionSet,
    budget: LengthBudget,
) -> Vec<PretrainSample> {
    let vocab = &params.vocab;
    let eos = TokenSequence::new(vec![vocab.eos_id]);
    let window = params.config.context_window;
    let mut samples = Vec::with_capacity(train.len() * 7);
    for t in train {
        let summary = crude_extract(&t.prompt, budget.max_tokens);
        let qa = |context: &str| {
            PretrainSample::completion(
                vocab.tokenize(&qa_prompt(context, &t.question)),
                vocab.tokenize(&t.answer).concat(&eos),
            )
        };
        // answering over short contexts is the transfer target for capsule
        // evaluation; the single-fact and fact-pair rungs make key-based
        // retrieval learnable before the full multi-fact case
        let mut batch = vec![qa(&t.prompt), qa(&summary), qa(&summary)];
        if let Some(fact) = crate::datasets::fact_for_answer(&t.prompt, &t.answer) {
            batch.push(qa(&fact));
            let distractors: Vec<&str> = summary
                .split_inclusive('.')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty() && !s.contains(&format!(" {} ", t.answer)))
                .collect();
            for (j, d) in distractors.iter().take(3).enumerate() {
                let pair = if j % 2 == 0 {
                    format!("{d} {fact}")
                } else {
                    format!("{fact} {d}")
                };
                batch.push(qa(&pair));
            }
        }
        batch.push(PretrainSample::full(
            vocab
                .tokenize(&instr.t_rep)
                .concat(&vocab.tokenize(&t.prompt))
                .concat(&eos),
        ));
        batch.push(PretrainSample::completion(
            vocab
                .tokenize(&instr.summ_with_budget(budget.max_tokens))
                .concat(&vocab.tokenize(&t.prompt)),
            vocab.tokenize(&summary).concat(&eos),
        ));
        for s in batch {
            if s.tokens.len() >= 2 && s.tokens.len() <= window && s.loss_from < s.tokens.len() {
                samples.push(s);
            }
        }
    }
    samples
}

/// LM pretraining: Adam on the (completion-masked) next-token NLL over
/// shuffled samples. Returns the per-step losses.
pub fn pretrain_loop(
    params: &mut ModelParams,
    samples: &[PretrainSample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("pretraining samples".into()));
    }
    if params.frozen {
        return Err(Error::ConfigInvalid(
            "refusing to pretrain frozen parameters".into(),
        ));
    }
    let mut opt = Adam::new(params, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let pos = step % samples.len();
        if pos == 0 {
            let epoch = step / samples.len();
            order = shuffled_indices(
                samples.len(),
                seed::derive_seed_indexed(cfg.seed, "pretrain-shuffle", epoch as u64),
            );
        }
        let progress = step as f64 / cfg.steps.max(1) as f64;
        opt.lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
        let sample = &samples[order[pos]];
        let mut grads = Gradients::zeros_like(params);
        let loss = lm_loss_grad_masked(params, &sample.tokens, sample.loss_from, &mut grads)?;
        if !loss.is_finite() || !grads.all_finite() {
            losses.push(loss);
            continue;
        }
        grads.clip_to_norm(cfg.grad_clip_norm);
        opt.step(params, &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean masked LM loss over samples; used as a validation monitor.
pub fn mean_lm_loss(params: &ModelParams, samples: &[PretrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("lm-loss samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let pass = forward(params, &s.tokens)?;
        let first = s.loss_from.saturating_sub(1);
        let n_pred = s.tokens.len() - 1 - first;
        let mut acc = 0.0;
        for t in first..s.tokens.len() - 1 {
            acc -= crate::textmodel::math::log_softmax_at(
                &pass.logits()[t],
                s.tokens.ids[t + 1] as usize,
            );
        }
        total += acc / n_pred as f64;
    }
    Ok(total / samples.len() as f64)
}
