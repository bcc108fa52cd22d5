//! Evaluation: exact-match utility, compression rate, API dollar cost, and
//! batched inference latency, with JSON/CSV report emitters.

use crate::datasets::{qa_prompt, QATriple};
use crate::error::{Error, Result};
use crate::textmodel::model::{Decoder, DecodeStrategy};
use crate::textmodel::{ModelParams, TokenSequence};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Case-, whitespace-, and punctuation-insensitive canonical form.
pub fn normalize_answer(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_space = true;
    for c in s.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    out.trim_end().to_string()
}

/// Normalized string equality.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

/// 1 − m/n. Token counts may be fractional (dataset means).
pub fn compression_rate(n_original: f64, m_compressed: f64) -> Result<f64> {
    if n_original <= 0.0 {
        return Err(Error::ZeroLengthOriginal);
    }
    Ok(1.0 - m_compressed / n_original)
}

/// 1 − compressed_cost/original_cost.
pub fn cost_saved_fraction(original: f64, compressed: f64) -> Result<f64> {
    if original <= 0.0 {
        return Err(Error::ZeroLengthOriginal);
    }
    Ok(1.0 - compressed / original)
}

/// Per-provider token prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderPricing {
    pub input_per_1k: f64,
    pub output_per_1k: f64,
    pub currency: String,
}

/// provider name → prices; loaded from a JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PricingTable(pub BTreeMap<String, ProviderPricing>);

impl PricingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn get(&self, provider: &str) -> Result<&ProviderPricing> {
        self.0
            .get(provider)
            .ok_or_else(|| Error::UnknownProvider(provider.to_string()))
    }
}

/// Input/output token counts of one request.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RequestTokens {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Σ over requests of in/1000·p_in + out/1000·p_out.
pub fn api_cost(
    requests: &[RequestTokens],
    pricing: &PricingTable,
    provider: &str,
) -> Result<f64> {
    let p = pricing.get(provider)?;
    Ok(requests
        .iter()
        .map(|r| {
            r.input_tokens as f64 / 1000.0 * p.input_per_1k
                + r.output_tokens as f64 / 1000.0 * p.output_per_1k
        })
        .sum())
}

/// Per-run utility/compression/cost record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub accuracy: f64,
    pub mean_prompt_tokens: f64,
    pub mean_original_tokens: f64,
    /// Mean of per-item rates (headline definition).
    pub compression_rate: f64,
    pub total_cost: f64,
    pub original_cost: f64,
    pub cost_saved_fraction: f64,
    pub items: usize,
    pub item_failures: usize,
}

/// Stable CSV header for [`EvalReport`] rows.
pub const EVAL_CSV_HEADER: &str = "dataset,method,accuracy,mean_prompt_tokens,\
mean_original_tokens,compression_rate,total_cost,original_cost,cost_saved_fraction,items,\
item_failures";

pub fn eval_reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{:.3},{:.3},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.dataset,
            r.method,
            r.accuracy,
            r.mean_prompt_tokens,
            r.mean_original_tokens,
            r.compression_rate,
            r.total_cost,
            r.original_cost,
            r.cost_saved_fraction,
            r.items,
            r.item_failures
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub dataset: String,
    pub method: String,
    pub max_answer_tokens: usize,
    pub pricing: Option<(PricingTable, String)>,
}

/// Answers every test triple by greedy decoding on (context ⊕ question) and
/// aggregates exact match, token counts, compression rate, and cost.
/// `contexts` holds the compressed (or original) context string per triple.
/// Item-level failures count as wrong and are tallied, not fatal.
pub fn run_eval(
    scorer: &ModelParams,
    test: &[QATriple],
    contexts: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test.is_empty() || test.len() != contexts.len() {
        return Err(Error::EmptyDataset(format!(
            "test items {} vs contexts {}",
            test.len(),
            contexts.len()
        )));
    }
    let mut correct = 0usize;
    let mut failures = 0usize;
    let mut sum_rate = 0.0;
    let mut sum_m = 0.0;
    let mut sum_n = 0.0;
    let mut method_requests = Vec::with_capacity(test.len());
    let mut original_requests = Vec::with_capacity(test.len());
    for (triple, context) in test.iter().zip(contexts) {
        let n = scorer.vocab.tokenize(&triple.prompt).len();
        let m = scorer.vocab.tokenize(context).len();
        sum_n += n as f64;
        sum_m += m as f64;
        sum_rate += compression_rate(n as f64, m as f64)?;
        let prompt = scorer.vocab.tokenize(&qa_prompt(context, &triple.question));
        let q_len = prompt.len() - m;
        match crate::textmodel::model::generate(
            scorer,
            &prompt,
            cfg.max_answer_tokens,
            DecodeStrategy::Greedy,
        ) {
            Ok(answer_tokens) => {
                let answer = scorer.vocab.detokenize(&answer_tokens);
                if exact_match(&answer, &triple.answer) {
                    correct += 1;
                }
                method_requests.push(RequestTokens {
                    input_tokens: prompt.len() as u64,
                    output_tokens: answer_tokens.len() as u64,
                });
                original_requests.push(RequestTokens {
                    input_tokens: (n + q_len) as u64,
                    output_tokens: answer_tokens.len() as u64,
                });
            }
            Err(_) => {
                failures += 1;
                method_requests.push(RequestTokens {
                    input_tokens: prompt.len() as u64,
                    output_tokens: 0,
                });
                original_requests.push(RequestTokens {
                    input_tokens: (n + q_len) as u64,
                    output_tokens: 0,
                });
            }
        }
    }
    let (total_cost, original_cost, saved) = match &cfg.pricing {
        Some((table, provider)) => {
            let c = api_cost(&method_requests, table, provider)?;
            let o = api_cost(&original_requests, table, provider)?;
            let saved = if o > 0.0 { 1.0 - c / o } else { 0.0 };
            (c, o, saved)
        }
        None => (0.0, 0.0, 0.0),
    };
    let items = test.len();
    Ok(EvalReport {
        dataset: cfg.dataset.clone(),
        method: cfg.method.clone(),
        accuracy: correct as f64 / items as f64,
        mean_prompt_tokens: sum_m / items as f64,
        mean_original_tokens: sum_n / items as f64,
        compression_rate: sum_rate / items as f64,
        total_cost,
        original_cost,
        cost_saved_fraction: saved,
        items,
        item_failures: failures,
    })
}

/// One latency measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub method: String,
    pub batch_size: usize,
    pub tokens_generated: usize,
    pub wall_seconds: f64,
    pub speedup_vs_original: f64,
    pub oom: bool,
}

pub const LATENCY_CSV_HEADER: &str =
    "method,batch_size,tokens_generated,wall_seconds,speedup_vs_original,oom";

pub fn latency_reports_csv(reports: &[LatencyReport]) -> String {
    let mut out = String::from(LATENCY_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.4},{}\n",
            r.method, r.batch_size, r.tokens_generated, r.wall_seconds, r.speedup_vs_original, r.oom
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct LatencyOpts {
    /// Timed repetitions; the median is reported.
    pub reps: usize,
    pub warmup: usize,
    pub gen_tokens: usize,
    /// Soft memory guard: batches whose projected KV-cache footprint
    /// exceeds this are reported as oom instead of run.
    pub kv_byte_cap: Option<usize>,
}

impl Default for LatencyOpts {
    fn default() -> Self {
        LatencyOpts {
            reps: 5,
            warmup: 1,
            gen_tokens: 200,
            kv_byte_cap: None,
        }
    }
}

/// Wall-clock to generate `gen_tokens` per sequence, original vs compressed
/// prompts, per batch size. Batches run in lockstep (every lane advances one
/// token per step) on one thread; run this exclusively.
pub fn latency_bench(
    model: &ModelParams,
    original: &[TokenSequence],
    compressed: &[TokenSequence],
    batch_sizes: &[usize],
    opts: &LatencyOpts,
) -> Result<Vec<LatencyReport>> {
    if original.is_empty() || compressed.is_empty() {
        return Err(Error::EmptyDataset("latency prompts".into()));
    }
    let mut reports = Vec::new();
    for &b in batch_sizes {
        let mut medians = [0.0f64; 2];
        let mut ooms = [false; 2];
        let mut gens = [0usize; 2];
        for (mi, prompts) in [original, compressed].into_iter().enumerate() {
            let batch: Vec<&TokenSequence> =
                (0..b).map(|i| &prompts[i % prompts.len()]).collect();
            if let Some(cap) = opts.kv_byte_cap {
                let projected = projected_kv_bytes(model, &batch, opts.gen_tokens);
                if projected > cap {
                    ooms[mi] = true;
                    continue;
                }
            }
            let mut timings = Vec::with_capacity(opts.reps);
            for rep in 0..opts.warmup + opts.reps {
                let start = Instant::now();
                gens[mi] = run_batch(model, &batch, opts.gen_tokens)?;
                let dt = start.elapsed().as_secs_f64();
                if rep >= opts.warmup {
                    timings.push(dt);
                }
            }
            timings.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians[mi] = timings[timings.len() / 2];
        }
        for (mi, name) in ["original", "compressed"].into_iter().enumerate() {
            let speedup = if mi == 0 || ooms[0] || ooms[1] || medians[mi] == 0.0 {
                1.0
            } else {
                medians[0] / medians[1]
            };
            reports.push(LatencyReport {
                method: name.to_string(),
                batch_size: b,
                tokens_generated: gens[mi],
                wall_seconds: medians[mi],
                speedup_vs_original: speedup,
                oom: ooms[mi],
            });
        }
    }
    Ok(reports)
}

fn projected_kv_bytes(model: &ModelParams, batch: &[&TokenSequence], gen: usize) -> usize {
    let d = model.config.d_model;
    let l = model.config.n_layers;
    batch
        .iter()
        .map(|p| (p.len() + gen) * d * l * 2 * std::mem::size_of::<f64>())
        .sum()
}

/// Greedy lockstep generation; returns tokens generated per sequence.
fn run_batch(model: &ModelParams, batch: &[&TokenSequence], gen_tokens: usize) -> Result<usize> {
    let window = model.config.context_window;
    let mut lanes: Vec<Decoder> = Vec::with_capacity(batch.len());
    let mut steps = gen_tokens;
    for prompt in batch {
        steps = steps.min(window.saturating_sub(prompt.len()));
        let mut dec = Decoder::new(model);
        for &id in &prompt.ids {
            dec.feed(id)?;
        }
        lanes.push(dec);
    }
    let mut next: Vec<u32> = lanes.iter().map(|d| argmax_u32(d.logits())).collect();
    for _ in 0..steps.saturating_sub(1) {
        for (lane, dec) in lanes.iter_mut().enumerate() {
            dec.feed(next[lane])?;
            next[lane] = argmax_u32(dec.logits());
        }
    }
    Ok(steps)
}

fn argmax_u32(xs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::{ModelConfig, Vocabulary};

    #[test]
    fn normalization_and_exact_match() {
        assert!(exact_match("  Yes.", "yes"));
        assert!(!exact_match("42", "24"));
        assert!(exact_match("The Answer:  7!", "the answer 7"));
    }

    #[test]
    fn exact_match_agrees_with_hand_labels() {
        let fixtures: [(&str, &str, bool); 20] = [
            ("yes", "Yes", true),
            ("  yes  ", "yes", true),
            ("yes.", "yes", true),
            ("Yes!", "yes", true),
            ("y e s", "yes", false),
            ("no", "yes", false),
            ("42", "42", true),
            ("42", "42.", true),
            ("42", "24", false),
            ("seven", "7", false),
            ("the cat", "The  Cat", true),
            ("the cat", "cat", false),
            ("A-B", "a b", true),
            ("a_b", "a b", true),
            ("", "", true),
            ("", "x", false),
            ("Paris, France", "paris france", true),
            ("paris", "Paris ", true),
            ("12 3", "123", false),
            ("answer: 9", "ANSWER 9", true),
        ];
        for (pred, gold, want) in fixtures {
            assert_eq!(exact_match(pred, gold), want, "({pred:?}, {gold:?})");
        }
    }

    #[test]
    fn compression_rate_reproduces_published_token_counts() {
        // (original tokens, compressed tokens, printed rate %)
        let rows = [
            (831.0, 154.0, 81.4),
            (751.0, 231.0, 69.3),
            (378.39, 95.66, 74.71),
            (915.7, 422.6, 53.84),
        ];
        for (n, m, want_pct) in rows {
            let got = compression_rate(n, m).unwrap() * 100.0;
            assert!(
                (got - want_pct).abs() <= 0.1,
                "({n}, {m}): {got:.3}% vs {want_pct}%"
            );
        }
    }

    #[test]
    fn compression_rate_edges() {
        assert_eq!(compression_rate(10.0, 10.0).unwrap(), 0.0);
        assert!(matches!(
            compression_rate(0.0, 1.0),
            Err(Error::ZeroLengthOriginal)
        ));
        // monotone decreasing in m
        let mut last = f64::INFINITY;
        for m in 0..10 {
            let r = compression_rate(10.0, m as f64).unwrap();
            assert!(r < last);
            last = r;
        }
    }

    fn table(input: f64, output: f64) -> PricingTable {
        let mut t = BTreeMap::new();
        t.insert(
            "api".to_string(),
            ProviderPricing {
                input_per_1k: input,
                output_per_1k: output,
                currency: "USD".into(),
            },
        );
        PricingTable(t)
    }

    #[test]
    fn api_cost_unit_arithmetic() {
        let t = table(0.008, 0.024);
        let cost = api_cost(
            &[RequestTokens {
                input_tokens: 1000,
                output_tokens: 0,
            }],
            &t,
            "api",
        )
        .unwrap();
        assert!((cost - 0.008).abs() < 1e-12);
        assert!(matches!(
            api_cost(&[], &t, "nope"),
            Err(Error::UnknownProvider(_))
        ));
    }

    #[test]
    fn api_cost_is_linear_in_tokens_and_prices() {
        let reqs = [
            RequestTokens {
                input_tokens: 1200,
                output_tokens: 300,
            },
            RequestTokens {
                input_tokens: 800,
                output_tokens: 100,
            },
        ];
        let base = api_cost(&reqs, &table(0.01, 0.03), "api").unwrap();
        // scaling token counts by 3 scales cost by 3
        let tripled: Vec<RequestTokens> = reqs
            .iter()
            .map(|r| RequestTokens {
                input_tokens: r.input_tokens * 3,
                output_tokens: r.output_tokens * 3,
            })
            .collect();
        let got = api_cost(&tripled, &table(0.01, 0.03), "api").unwrap();
        assert!((got - 3.0 * base).abs() < 1e-12);
        // scaling prices by 5 scales cost by 5
        let got = api_cost(&reqs, &table(0.05, 0.15), "api").unwrap();
        assert!((got - 5.0 * base).abs() < 1e-12);
    }

    #[test]
    fn cost_saved_reproduces_published_dollar_figures() {
        // (original $, compressed $, printed saved %), one tight table
        let rows = [
            (15.03, 3.30, 77.9),
            (5.22, 1.88, 63.9),
            (45.91, 13.01, 71.6),
            (2.14, 0.42, 80.1),
        ];
        for (orig, comp, want_pct) in rows {
            let got = cost_saved_fraction(orig, comp).unwrap() * 100.0;
            assert!(
                (got - want_pct).abs() <= 0.5,
                "({orig}, {comp}): {got:.2}% vs {want_pct}%"
            );
        }
    }

    fn eval_scorer() -> ModelParams {
        let vocab = Vocabulary::build(&[
            "ash birch cedar dune elm fern Question: Answer: what comes after",
        ]);
        ModelParams::init(
            ModelConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                context_window: 128,
                seed: 5,
            },
            vocab,
        )
        .unwrap()
        .frozen_clone()
    }

    #[test]
    fn run_eval_counts_and_rates() {
        let scorer = eval_scorer();
        let test: Vec<QATriple> = (0..4)
            .map(|i| QATriple {
                id: format!("t{i}"),
                prompt: "ash birch cedar dune elm fern ash birch".into(),
                question: "what comes after ash".into(),
                answer: "zzz-never-matches".into(),
            })
            .collect();
        let contexts: Vec<String> = test.iter().map(|_| "ash birch".to_string()).collect();
        let cfg = EvalConfig {
            dataset: "toy".into(),
            method: "fixture".into(),
            max_answer_tokens: 4,
            pricing: Some((table(1.0, 0.0), "api".into())),
        };
        let report = run_eval(&scorer, &test, &contexts, &cfg).unwrap();
        assert_eq!(report.items, 4);
        assert_eq!(report.accuracy, 0.0);
        // per-item rate: 1 - 2/8 = 0.75 for every item, so the mean matches
        assert!((report.compression_rate - 0.75).abs() < 1e-12);
        assert!(report.total_cost < report.original_cost);
        assert!(report.cost_saved_fraction > 0.0);
    }

    #[test]
    fn run_eval_perfect_fixture_scores_one() {
        // answers the model will actually produce: gold = greedy output
        let scorer = eval_scorer();
        let context = "ash birch cedar";
        let question = "what comes after";
        let prompt = scorer
            .vocab
            .tokenize(&qa_prompt(context, question));
        let out = crate::textmodel::model::generate(
            &scorer,
            &prompt,
            4,
            DecodeStrategy::Greedy,
        )
        .unwrap();
        let gold = scorer.vocab.detokenize(&out);
        let test = vec![QATriple {
            id: "t0".into(),
            prompt: "ash birch cedar dune".into(),
            question: question.into(),
            answer: gold,
        }];
        let cfg = EvalConfig {
            dataset: "toy".into(),
            method: "fixture".into(),
            max_answer_tokens: 4,
            pricing: None,
        };
        let report = run_eval(&scorer, &test, &[context.to_string()], &cfg).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn latency_bench_reports_shape_and_self_speedup() {
        let scorer = eval_scorer();
        let prompts: Vec<TokenSequence> = (0..2)
            .map(|_| scorer.vocab.tokenize("ash birch cedar dune elm fern"))
            .collect();
        let opts = LatencyOpts {
            reps: 3,
            warmup: 1,
            gen_tokens: 8,
            kv_byte_cap: None,
        };
        let reports =
            latency_bench(&scorer, &prompts, &prompts, &[1, 2], &opts).unwrap();
        assert_eq!(reports.len(), 4, "batch sizes × 2 methods");
        for r in &reports {
            assert!(!r.oom);
            assert!(r.wall_seconds > 0.0);
            assert_eq!(r.tokens_generated, 8);
            if r.method == "compressed" {
                // identical prompt sets: speedup ≈ 1 up to timing noise
                assert!(
                    r.speedup_vs_original > 0.4 && r.speedup_vs_original < 2.5,
                    "self-speedup {}",
                    r.speedup_vs_original
                );
            }
        }
    }

    #[test]
    fn latency_bench_oom_guard_reports_not_crashes() {
        let scorer = eval_scorer();
        let prompts = vec![scorer.vocab.tokenize("ash birch cedar")];
        let opts = LatencyOpts {
            reps: 1,
            warmup: 0,
            gen_tokens: 4,
            kv_byte_cap: Some(1), // everything "overflows"
        };
        let reports = latency_bench(&scorer, &prompts, &prompts, &[1], &opts).unwrap();
        assert!(reports.iter().all(|r| r.oom));
    }

    #[test]
    fn csv_emitters_have_stable_headers() {
        let e = EvalReport {
            dataset: "d".into(),
            method: "m".into(),
            accuracy: 0.5,
            mean_prompt_tokens: 10.0,
            mean_original_tokens: 40.0,
            compression_rate: 0.75,
            total_cost: 1.0,
            original_cost: 4.0,
            cost_saved_fraction: 0.75,
            items: 2,
            item_failures: 0,
        };
        let csv = eval_reports_csv(&[e]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), EVAL_CSV_HEADER);
        assert!(lines.next().unwrap().starts_with("d,m,0.5"));
        let l = LatencyReport {
            method: "original".into(),
            batch_size: 2,
            tokens_generated: 200,
            wall_seconds: 1.5,
            speedup_vs_original: 1.0,
            oom: false,
        };
        let csv = latency_reports_csv(&[l]);
        assert!(csv.starts_with(LATENCY_CSV_HEADER));
    }
}
