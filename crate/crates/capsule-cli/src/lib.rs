//! Pipeline orchestration behind the `capsule` binary: a declarative run
//! configuration drives pretraining, compression training, capsule
//! generation, baselines, evaluation, cost accounting, and latency
//! benchmarking. Every command writes its artifacts plus a resolved-config
//! snapshot under the output directory; one top-level seed derives every
//! sub-seed, so re-running a command reproduces artifact bytes exactly.

use anyhow::{bail, Context, Result};
use capsule_core::baselines::{self, UnitScore};
use capsule_core::compression::{CompressionOpts, InstructionSet};
use capsule_core::datasets::{
    self, load_jsonl, save_jsonl, synth_corpus, DatasetManifest, QATriple, Splits, SynthKind,
};
use capsule_core::eval::{
    eval_reports_csv, latency_reports_csv, run_eval as core_run_eval, EvalConfig, EvalReport,
    LatencyOpts, LatencyReport, PricingTable,
};
use capsule_core::reward::{truncate, LengthBudget, RewardConfig, RewardMetric};
use capsule_core::seed::derive_seed;
use capsule_core::textmodel::model::DecodeStrategy;
use capsule_core::textmodel::{
    load_checkpoint, save_checkpoint, ModelConfig, ModelParams, TokenSequence,
};
use capsule_core::trainer::{
    build_pretrain_samples, mean_lm_loss, pretrain_loop, train_loop, PretrainConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSpec {
    Synth { synth: SynthSpec },
    Manifest { manifest_path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
}

fn default_pretrain_lr() -> f64 {
    1e-3
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub max_steps: usize,
    #[serde(default = "default_train_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default = "default_true")]
    pub use_reward: bool,
}

fn default_train_lr() -> f64 {
    3e-4
}

fn default_patience() -> usize {
    3
}

fn default_eval_every() -> usize {
    25
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Hard token budget; ignored when `fraction_of_mean_prompt` is set.
    #[serde(default)]
    pub max_tokens: usize,
    /// Budget as a fraction of the corpus mean prompt length, resolved at
    /// command time and recorded in the config snapshot.
    #[serde(default)]
    pub fraction_of_mean_prompt: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardSpec {
    #[serde(default)]
    pub metric: RewardMetric,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default = "default_answer_tokens")]
    pub max_answer_tokens: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            metric: RewardMetric::HiddenMse,
            sample_size: default_sample_size(),
            r_min: default_r_min(),
            r_max: default_r_max(),
            max_answer_tokens: default_answer_tokens(),
        }
    }
}

fn default_sample_size() -> usize {
    4
}

fn default_r_min() -> f64 {
    0.01
}

fn default_r_max() -> f64 {
    10.0
}

fn default_answer_tokens() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nano,
    ZeroShot,
    SelectiveContext,
    RandomDrop,
    Original,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nano => "nano",
            Method::ZeroShot => "zero_shot",
            Method::SelectiveContext => "selective_context",
            Method::RandomDrop => "random_drop",
            Method::Original => "original",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSpec {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub unit_score: UnitScore,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            method: Method::SelectiveContext,
            unit_score: UnitScore::SelfInfoSum,
        }
    }
}

fn default_method() -> Method {
    Method::SelectiveContext
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default = "default_answer_tokens")]
    pub max_answer_tokens: usize,
    /// Truncate every context to the budget before answering, so methods
    /// compete at equal budget.
    #[serde(default = "default_true")]
    pub truncate_to_budget: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            max_answer_tokens: default_answer_tokens(),
            truncate_to_budget: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSpec {
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_gen_tokens")]
    pub gen_tokens: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub kv_byte_cap: Option<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            batch_sizes: default_batch_sizes(),
            gen_tokens: default_gen_tokens(),
            reps: default_reps(),
            warmup: default_warmup(),
            kv_byte_cap: None,
        }
    }
}

fn default_batch_sizes() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_gen_tokens() -> usize {
    200
}

fn default_reps() -> usize {
    5
}

fn default_warmup() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    #[default]
    Fewshot,
    Reading,
}

/// The declarative run configuration. Flags win over file values; every
/// sub-seed derives from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub instructions_path: Option<PathBuf>,
    #[serde(default)]
    pub instruction_kind: InstructionKind,
    pub dataset: DatasetSpec,
    pub pretrain: PretrainSpec,
    pub train: TrainSpec,
    pub budget: BudgetSpec,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub baseline: BaselineSpec,
    #[serde(default)]
    pub pricing_path: Option<PathBuf>,
    #[serde(default = "default_provider")]
    pub provider: String,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub bench: BenchSpec,
}

fn default_provider() -> String {
    "desk".to_string()
}

impl RunConfig {
    /// Loads a config file and applies `--override key.path=value` pairs,
    /// then the `--seed`/`--out` flags.
    pub fn load(
        path: &Path,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<PathBuf>,
    ) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("config file {} not readable", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_slice(&bytes).context("config is not valid JSON")?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).context("config failed validation")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out_dir = o;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model = ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            context_window: self.model.context_window,
            seed: 0,
        };
        model.validate().context("field model")?;
        if self.budget.max_tokens == 0 && self.budget.fraction_of_mean_prompt.is_none() {
            bail!("field budget: set max_tokens ≥ 1 or fraction_of_mean_prompt");
        }
        if let Some(f) = self.budget.fraction_of_mean_prompt {
            if !(f > 0.0 && f <= 1.0) {
                bail!("field budget.fraction_of_mean_prompt: must be in (0, 1]");
            }
        }
        if let Some(p) = &self.instructions_path {
            if !p.exists() {
                bail!("field instructions_path: {} does not exist", p.display());
            }
        }
        if let Some(p) = &self.pricing_path {
            if !p.exists() {
                bail!("field pricing_path: {} does not exist", p.display());
            }
        }
        if let DatasetSpec::Manifest { manifest_path } = &self.dataset {
            if !manifest_path.exists() {
                bail!(
                    "field dataset.manifest_path: {} does not exist",
                    manifest_path.display()
                );
            }
        }
        Ok(())
    }

    pub fn instructions(&self) -> Result<InstructionSet> {
        let instr = match &self.instructions_path {
            Some(p) => InstructionSet::load(p)?,
            None => match self.instruction_kind {
                InstructionKind::Fewshot => InstructionSet::fewshot_default(),
                InstructionKind::Reading => InstructionSet::reading_default(),
            },
        };
        Ok(instr)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.dataset {
            DatasetSpec::Synth { synth } => Ok(synth_corpus(
                synth.kind,
                synth.size,
                derive_seed(self.seed, "corpus"),
            )?),
            DatasetSpec::Manifest { manifest_path } => Ok(load_jsonl(manifest_path)?),
        }
    }

    pub fn splits(&self, manifest: &DatasetManifest) -> Result<Splits> {
        Ok(datasets::split(manifest, derive_seed(self.seed, "split"))?)
    }

    /// Budget in tokens, resolving the fraction-of-mean-prompt form against
    /// the corpus under the given vocabulary.
    pub fn resolve_budget(
        &self,
        manifest: &DatasetManifest,
        vocab: &capsule_core::textmodel::Vocabulary,
    ) -> LengthBudget {
        match self.budget.fraction_of_mean_prompt {
            Some(f) => {
                let mean = manifest
                    .records
                    .iter()
                    .map(|r| vocab.tokenize(&r.prompt).len() as f64)
                    .sum::<f64>()
                    / manifest.records.len() as f64;
                LengthBudget::new((mean * f).round() as usize)
            }
            None => LengthBudget::new(self.budget.max_tokens),
        }
    }

    pub fn reward_config(&self, budget: LengthBudget) -> RewardConfig {
        RewardConfig {
            metric: self.reward.metric,
            sample_size: self.reward.sample_size,
            budget,
            r_min: self.reward.r_min,
            r_max: self.reward.r_max,
            max_answer_tokens: self.reward.max_answer_tokens,
        }
    }

    pub fn train_config(&self, budget: LengthBudget) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            grad_clip_norm: self.train.grad_clip_norm,
            max_steps: self.train.max_steps,
            patience: self.train.patience,
            budget,
            reward_cfg: self.reward_config(budget),
            seed: derive_seed(self.seed, "train"),
            eval_every: self.train.eval_every,
            grad_accum: self.train.grad_accum,
            use_reward: self.train.use_reward,
            compression: CompressionOpts::default(),
            strategy: DecodeStrategy::Greedy,
        }
    }

    pub fn pricing(&self) -> Result<Option<(PricingTable, String)>> {
        match &self.pricing_path {
            Some(p) => Ok(Some((PricingTable::load(p)?, self.provider.clone()))),
            None => Ok(None),
        }
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.out_dir.join("pretrained.ckpt.json")
    }

    pub fn trained_path(&self) -> PathBuf {
        self.out_dir.join("trained.ckpt.json")
    }

    pub fn capsules_path(&self, method: Method) -> PathBuf {
        self.out_dir
            .join(format!("capsules_{}.jsonl", method.name()))
    }

    fn run_id(&self) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in body.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            cursor
                .as_object_mut()
                .with_context(|| format!("override {key:?}: {part:?} is not an object field"))?
                .insert(part.to_string(), parsed.clone());
        } else {
            cursor = cursor
                .as_object_mut()
                .with_context(|| format!("override {key:?}: {part:?} is not an object field"))?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Exclusive-writer guard on the output directory; removed on drop.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let path = out_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = write!(f, "{}", std::process::id());
                Ok(OutDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    out_dir.display(),
                    path.display()
                )
            }
            Err(e) => Err(e).context("creating lock file"),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    command: &'a str,
    run_id: String,
    resolved_budget_tokens: usize,
    config: &'a RunConfig,
}

fn write_snapshot(cfg: &RunConfig, command: &str, budget: LengthBudget) -> Result<()> {
    let snap = ConfigSnapshot {
        command,
        run_id: cfg.run_id(),
        resolved_budget_tokens: budget.max_tokens,
        config: cfg,
    };
    let path = cfg.out_dir.join(format!("{command}.config.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&snap)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// One line of the capsule prompts file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapsuleRecord {
    pub id: String,
    pub original_tokens: usize,
    pub capsule: String,
    pub capsule_tokens: usize,
}

pub fn write_capsules(records: &[CapsuleRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_capsules(path: &Path) -> Result<Vec<CapsuleRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("capsules file {} not readable", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Builds the vocabulary for a fresh model: corpus text, instruction
/// renders (with the budget substituted), and the QA glue.
fn build_vocab(
    manifest: &DatasetManifest,
    instr: &InstructionSet,
    budget_probe: usize,
) -> capsule_core::textmodel::Vocabulary {
    let mut texts: Vec<String> = Vec::with_capacity(manifest.records.len() * 3 + 4);
    for r in &manifest.records {
        texts.push(r.prompt.clone());
        texts.push(r.question.clone());
        texts.push(r.answer.clone());
    }
    texts.push(instr.t_rep.clone());
    texts.push(instr.summ_with_budget(budget_probe));
    // budget renders vary by run; cover the digits so any number tokenizes
    texts.push("0 1 2 3 4 5 6 7 8 9 10 Question: Answer:".to_string());
    let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
    capsule_core::textmodel::Vocabulary::build(&refs)
}

/// Pretrains the base model on the corpus mixture and writes the
/// `pretrained.ckpt.json` checkpoint plus the corpus and loss log.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let instr = cfg.instructions()?;
    let manifest = cfg.manifest()?;
    let splits = cfg.splits(&manifest)?;
    // the budget fraction needs a vocabulary; any probe value works because
    // word-level budgets only affect the instruction render
    let probe_budget = cfg.budget.max_tokens.max(10);
    let vocab = build_vocab(&manifest, &instr, probe_budget);
    let budget = cfg.resolve_budget(&manifest, &vocab);
    write_snapshot(cfg, "pretrain", budget)?;
    save_jsonl(&manifest, &cfg.out_dir.join("corpus.jsonl"))?;

    let model_cfg = ModelConfig {
        n_layers: cfg.model.n_layers,
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        context_window: cfg.model.context_window,
        seed: derive_seed(cfg.seed, "model-init"),
    };
    let mut params = ModelParams::init(model_cfg, vocab)?;
    let samples = build_pretrain_samples(&splits.train, &params, &instr, budget);
    let pre_cfg = PretrainConfig {
        final_lr_fraction: 0.1,
        steps: cfg.pretrain.steps,
        learning_rate: cfg.pretrain.learning_rate,
        grad_clip_norm: cfg.pretrain.grad_clip_norm,
        seed: derive_seed(cfg.seed, "pretrain"),
    };
    let losses = pretrain_loop(&mut params, &samples, &pre_cfg)?;
    let mut log = String::new();
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{{\"step\":{},\"lm_loss\":{}}}\n", i + 1, l));
    }
    std::fs::write(cfg.out_dir.join("pretrain_log.jsonl"), log)?;
    let path = cfg.pretrained_path();
    save_checkpoint(&params, &path)?;
    let val_samples = build_pretrain_samples(&splits.val, &params, &instr, budget);
    if !val_samples.is_empty() {
        let val_loss = mean_lm_loss(&params, &val_samples)?;
        eprintln!(
            "pretrain: {} steps, final train loss {:.4}, val lm loss {:.4}",
            losses.len(),
            losses.last().copied().unwrap_or(f64::NAN),
            val_loss
        );
    }
    Ok(path)
}

/// Trains the compressor against the frozen pretrained scorer and writes
/// `trained.ckpt.json` plus the JSONL training log.
pub fn run_train(cfg: &RunConfig) -> Result<PathBuf> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let instr = cfg.instructions()?;
    let manifest = cfg.manifest()?;
    let splits = cfg.splits(&manifest)?;
    let pretrained = load_checkpoint(cfg.pretrained_path())
        .context("pretrained checkpoint missing; run `capsule pretrain` first")?;
    let budget = cfg.resolve_budget(&manifest, &pretrained.vocab);
    write_snapshot(cfg, "train", budget)?;
    let scorer = pretrained.frozen_clone();
    let train_cfg = cfg.train_config(budget);
    let (best, log) = train_loop(pretrained, &scorer, &splits, &instr, &train_cfg)?;
    log.write_jsonl(cfg.out_dir.join("train_log.jsonl"))?;
    let path = cfg.trained_path();
    save_checkpoint(&best, &path)?;
    eprintln!(
        "train: {} steps, best val nano loss {:.6} at step {}",
        log.records.len(),
        log.best_val_loss,
        log.best_step
    );
    Ok(path)
}

/// Compresses the test split (or an explicit prompts file) with the chosen
/// method, writing a capsule prompts JSONL.
pub fn run_compress(cfg: &RunConfig, method: Method, input: Option<&Path>) -> Result<PathBuf> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let instr = cfg.instructions()?;
    let manifest = cfg.manifest()?;
    let triples: Vec<QATriple> = match input {
        Some(p) => load_jsonl(p)?.records,
        None => cfg.splits(&manifest)?.test,
    };
    let checkpoint = match method {
        Method::Nano => load_checkpoint(cfg.trained_path())
            .context("trained checkpoint missing; run `capsule train` first")?,
        _ => load_checkpoint(cfg.pretrained_path())
            .context("pretrained checkpoint missing; run `capsule pretrain` first")?,
    };
    let budget = cfg.resolve_budget(&manifest, &checkpoint.vocab);
    write_snapshot(cfg, &format!("compress_{}", method.name()), budget)?;
    let records = compress_records(cfg, &checkpoint, &instr, &triples, method, budget)?;
    let path = cfg.capsules_path(method);
    write_capsules(&records, &path)?;
    eprintln!(
        "compress[{}]: {} capsules, mean length {:.1} tokens (budget {})",
        method.name(),
        records.len(),
        records.iter().map(|r| r.capsule_tokens as f64).sum::<f64>() / records.len().max(1) as f64,
        budget.max_tokens
    );
    Ok(path)
}

fn compress_records(
    cfg: &RunConfig,
    checkpoint: &ModelParams,
    instr: &InstructionSet,
    triples: &[QATriple],
    method: Method,
    budget: LengthBudget,
) -> Result<Vec<CapsuleRecord>> {
    let opts = CompressionOpts::default();
    let frozen = checkpoint.frozen_clone();
    let mut records = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        let k = checkpoint.vocab.tokenize(&t.prompt);
        let capsule_tokens: TokenSequence = match method {
            Method::Nano | Method::ZeroShot => {
                let gen = capsule_core::compression::summarize_generate(
                    checkpoint,
                    &k,
                    instr,
                    budget.max_tokens,
                    DecodeStrategy::Greedy,
                    &opts,
                )?;
                gen.capsule
            }
            Method::SelectiveContext => {
                baselines::selective_context(&frozen, &k, budget, cfg.baseline.unit_score)?
            }
            Method::RandomDrop => baselines::random_drop(
                &t.prompt,
                &frozen,
                budget,
                capsule_core::seed::derive_seed_indexed(cfg.seed, "random-drop", i as u64),
            )?,
            Method::Original => k.clone(),
        };
        records.push(CapsuleRecord {
            id: t.id.clone(),
            original_tokens: k.len(),
            capsule: checkpoint.vocab.detokenize(&capsule_tokens),
            capsule_tokens: capsule_tokens.len(),
        });
    }
    Ok(records)
}

/// Evaluates a capsules file against the test split under the frozen scorer
/// and writes JSON + CSV reports.
pub fn run_eval(cfg: &RunConfig, capsules_path: &Path, method_name: &str) -> Result<EvalReport> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let manifest = cfg.manifest()?;
    let test = cfg.splits(&manifest)?.test;
    let scorer = load_checkpoint(cfg.pretrained_path())
        .context("pretrained checkpoint missing; run `capsule pretrain` first")?
        .frozen_clone();
    let budget = cfg.resolve_budget(&manifest, &scorer.vocab);
    write_snapshot(cfg, &format!("eval_{method_name}"), budget)?;
    let records = read_capsules(capsules_path)?;
    let by_id: std::collections::BTreeMap<&str, &CapsuleRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut contexts = Vec::with_capacity(test.len());
    for t in &test {
        let r = by_id
            .get(t.id.as_str())
            .with_context(|| format!("capsules file has no record for test id {:?}", t.id))?;
        let context = if cfg.eval.truncate_to_budget {
            let toks = scorer.vocab.tokenize(&r.capsule);
            scorer.vocab.detokenize(&truncate(&toks, budget))
        } else {
            r.capsule.clone()
        };
        contexts.push(context);
    }
    let eval_cfg = EvalConfig {
        dataset: manifest.name.clone(),
        method: method_name.to_string(),
        max_answer_tokens: cfg.eval.max_answer_tokens,
        pricing: cfg.pricing()?,
    };
    let report = core_run_eval(&scorer, &test, &contexts, &eval_cfg)?;
    std::fs::write(
        cfg.out_dir.join(format!("eval_{method_name}.json")),
        serde_json::to_vec_pretty(&report)?,
    )?;
    std::fs::write(
        cfg.out_dir.join(format!("eval_{method_name}.csv")),
        eval_reports_csv(&[report.clone()]),
    )?;
    eprintln!(
        "eval[{method_name}]: accuracy {:.3}, compression rate {:.1}%, items {}",
        report.accuracy,
        report.compression_rate * 100.0,
        report.items
    );
    Ok(report)
}

/// Cost report for a capsules file: original-vs-capsule input token cost
/// under the configured pricing table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub provider: String,
    pub currency: String,
    pub items: usize,
    pub original_tokens: u64,
    pub capsule_tokens: u64,
    pub original_cost: f64,
    pub capsule_cost: f64,
    pub cost_saved_fraction: f64,
}

pub fn run_cost(cfg: &RunConfig, capsules_path: &Path, method_name: &str) -> Result<CostReport> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let (pricing, provider) = cfg
        .pricing()?
        .context("cost accounting needs pricing_path in the config")?;
    let records = read_capsules(capsules_path)?;
    if records.is_empty() {
        bail!("capsules file {} is empty", capsules_path.display());
    }
    let p = pricing.get(&provider)?.clone();
    let original_tokens: u64 = records.iter().map(|r| r.original_tokens as u64).sum();
    let capsule_tokens: u64 = records.iter().map(|r| r.capsule_tokens as u64).sum();
    let original_cost = original_tokens as f64 / 1000.0 * p.input_per_1k;
    let capsule_cost = capsule_tokens as f64 / 1000.0 * p.input_per_1k;
    let report = CostReport {
        provider,
        currency: p.currency.clone(),
        items: records.len(),
        original_tokens,
        capsule_tokens,
        original_cost,
        capsule_cost,
        cost_saved_fraction: if original_cost > 0.0 {
            1.0 - capsule_cost / original_cost
        } else {
            0.0
        },
    };
    std::fs::write(
        cfg.out_dir.join(format!("cost_{method_name}.json")),
        serde_json::to_vec_pretty(&report)?,
    )?;
    eprintln!(
        "cost[{method_name}]: {} {:.4} → {:.4} ({:.1}% saved)",
        report.currency,
        report.original_cost,
        report.capsule_cost,
        report.cost_saved_fraction * 100.0
    );
    Ok(report)
}

/// Latency bench: original test prompts vs a capsules file, batched.
pub fn run_bench(cfg: &RunConfig, capsules_path: &Path) -> Result<Vec<LatencyReport>> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let manifest = cfg.manifest()?;
    let test = cfg.splits(&manifest)?.test;
    let model = load_checkpoint(cfg.pretrained_path())
        .context("pretrained checkpoint missing; run `capsule pretrain` first")?
        .frozen_clone();
    let budget = cfg.resolve_budget(&manifest, &model.vocab);
    write_snapshot(cfg, "bench", budget)?;
    let records = read_capsules(capsules_path)?;
    let by_id: std::collections::BTreeMap<&str, &CapsuleRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut original = Vec::new();
    let mut compressed = Vec::new();
    for t in &test {
        if let Some(r) = by_id.get(t.id.as_str()) {
            original.push(model.vocab.tokenize(&t.prompt));
            let toks = model.vocab.tokenize(&r.capsule);
            compressed.push(truncate(&toks, budget));
        }
    }
    let opts = LatencyOpts {
        reps: cfg.bench.reps,
        warmup: cfg.bench.warmup,
        gen_tokens: cfg.bench.gen_tokens,
        kv_byte_cap: cfg.bench.kv_byte_cap,
    };
    let reports = capsule_core::eval::latency_bench(
        &model,
        &original,
        &compressed,
        &cfg.bench.batch_sizes,
        &opts,
    )?;
    std::fs::write(
        cfg.out_dir.join("latency.json"),
        serde_json::to_vec_pretty(&reports)?,
    )?;
    std::fs::write(
        cfg.out_dir.join("latency.csv"),
        latency_reports_csv(&reports),
    )?;
    for r in &reports {
        eprintln!(
            "bench[{}] batch {}: {:.3}s{}",
            r.method,
            r.batch_size,
            r.wall_seconds,
            if r.method == "compressed" {
                format!(" (speedup {:.2}×)", r.speedup_vs_original)
            } else {
                String::new()
            }
        );
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config(dir: &Path) -> RunConfig {
        RunConfig {
            seed: 11,
            out_dir: dir.to_path_buf(),
            model: ModelSpec {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                context_window: 320,
            },
            instructions_path: None,
            instruction_kind: InstructionKind::Fewshot,
            dataset: DatasetSpec::Synth {
                synth: SynthSpec {
                    kind: SynthKind::ArithCot,
                    size: 20,
                },
            },
            pretrain: PretrainSpec {
                steps: 5,
                learning_rate: 1e-3,
                grad_clip_norm: 1.0,
            },
            train: TrainSpec {
                max_steps: 4,
                learning_rate: 3e-4,
                grad_clip_norm: 1.0,
                patience: 2,
                eval_every: 2,
                grad_accum: 1,
                use_reward: true,
            },
            budget: BudgetSpec {
                max_tokens: 16,
                fraction_of_mean_prompt: None,
            },
            reward: RewardSpec {
                sample_size: 2,
                ..RewardSpec::default()
            },
            baseline: BaselineSpec::default(),
            pricing_path: None,
            provider: "desk".into(),
            eval: EvalSpec::default(),
            bench: BenchSpec {
                batch_sizes: vec![1],
                gen_tokens: 4,
                reps: 1,
                warmup: 0,
                kv_byte_cap: None,
            },
        }
    }

    #[test]
    fn overrides_apply_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = minimal_config(dir.path());
        std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
        let loaded = RunConfig::load(
            &path,
            &["train.max_steps=9".into(), "provider=other".into()],
            Some(99),
            None,
        )
        .unwrap();
        assert_eq!(loaded.train.max_steps, 9);
        assert_eq!(loaded.provider, "other");
        assert_eq!(loaded.seed, 99, "flag beats file");
    }

    #[test]
    fn missing_referenced_path_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut cfg = minimal_config(dir.path());
        cfg.pricing_path = Some(dir.path().join("nope.json"));
        std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
        let err = RunConfig::load(&path, &[], None, None).unwrap_err();
        assert!(err.to_string().contains("pricing_path"), "{err}");
    }

    #[test]
    fn missing_config_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, b"{\"seed\": 1}").unwrap();
        let err = RunConfig::load(&path, &[], None, None).unwrap_err();
        let chain = format!("{err:#}");
        assert!(chain.contains("missing field"), "{chain}");
    }

    #[test]
    fn lock_file_blocks_concurrent_writers() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutDirLock::acquire(dir.path()).unwrap();
        assert!(OutDirLock::acquire(dir.path()).is_err());
        drop(a);
        let _b = OutDirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn capsule_file_round_trip_preserves_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caps.jsonl");
        let records: Vec<CapsuleRecord> = (0..3)
            .map(|i| CapsuleRecord {
                id: format!("id-{i}"),
                original_tokens: 100 + i,
                capsule: format!("short {i}"),
                capsule_tokens: 2,
            })
            .collect();
        write_capsules(&records, &path).unwrap();
        let loaded = read_capsules(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.capsule, b.capsule);
        }
    }

    #[test]
    fn pipeline_smoke_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = minimal_config(&dir.path().join("out"));
        run_pretrain(&cfg).unwrap();
        run_train(&cfg).unwrap();
        let caps = run_compress(&cfg, Method::Nano, None).unwrap();
        run_eval(&cfg, &caps, "nano").unwrap();
        let out = &cfg.out_dir;
        for f in [
            "corpus.jsonl",
            "pretrained.ckpt.json",
            "pretrain_log.jsonl",
            "trained.ckpt.json",
            "train_log.jsonl",
            "capsules_nano.jsonl",
            "eval_nano.json",
            "eval_nano.csv",
            "pretrain.config.json",
            "train.config.json",
        ] {
            assert!(out.join(f).exists(), "missing artifact {f}");
        }
        // compress on 3 explicit prompts preserves ids
        let test = cfg.splits(&cfg.manifest().unwrap()).unwrap().test;
        let sub = DatasetManifest {
            name: "sub".into(),
            task_kind: capsule_core::datasets::TaskKind::Cot,
            records: test[..3].to_vec(),
            split_seed: 0,
        };
        let sub_path = dir.path().join("sub.jsonl");
        save_jsonl(&sub, &sub_path).unwrap();
        let caps = run_compress(&cfg, Method::ZeroShot, Some(&sub_path)).unwrap();
        let records = read_capsules(&caps).unwrap();
        assert_eq!(records.len(), 3);
        for (r, t) in records.iter().zip(&sub.records) {
            assert_eq!(r.id, t.id);
        }
    }
}
