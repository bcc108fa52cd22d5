//! Scratch probe: inspect scorer behaviour on a pretrained checkpoint.
use capsule_core::datasets::qa_prompt;
use capsule_core::textmodel::load_checkpoint;
use capsule_core::textmodel::model::{generate, DecodeStrategy};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args[0].clone();
    let overrides: Vec<String> = args[1..].to_vec();
    let params = load_checkpoint(&ckpt).unwrap();
    let cfg = capsule_cli::RunConfig::load(std::path::Path::new("configs/desk.json"), &overrides, None, None).unwrap();
    let manifest = cfg.manifest().unwrap();
    let splits = cfg.splits(&manifest).unwrap();
    for t in splits.test.iter().take(4) {
        let prompt = params.vocab.tokenize(&qa_prompt(&t.prompt, &t.question));
        let out = generate(&params, &prompt, 8, DecodeStrategy::Greedy).unwrap();
        println!("Q: {}", t.question);
        println!("gold: {:?}  model: {:?}", t.answer, params.vocab.detokenize(&out));
    }
    // full-context answer accuracy on the whole test split
    let mut full_hits = 0usize;
    // summary-context accuracy (what capsules should achieve)
    let mut summ_hits = 0usize;
    // empty-context accuracy (floor: is context load-bearing?)
    let mut empty_hits = 0usize;
    let n = splits.test.len();
    for t in &splits.test {
        for (ctx, hits) in [
            (t.prompt.clone(), &mut full_hits),
            (capsule_core::datasets::crude_extract(&t.prompt, 44), &mut summ_hits),
            (String::new(), &mut empty_hits),
        ] {
            let prompt = params.vocab.tokenize(&qa_prompt(&ctx, &t.question));
            let out = generate(&params, &prompt, 8, DecodeStrategy::Greedy).unwrap();
            if capsule_core::eval::exact_match(&params.vocab.detokenize(&out), &t.answer) {
                *hits += 1;
            }
        }
    }
    println!("full-context accuracy:    {full_hits}/{n}");
    println!("summary-context accuracy: {summ_hits}/{n}");
    println!("empty-context accuracy:   {empty_hits}/{n}");
    let mut fact_hits = 0usize;
    for t in &splits.test {
        if let Some(fact) = capsule_core::datasets::fact_for_answer(&t.prompt, &t.answer) {
            let prompt = params.vocab.tokenize(&qa_prompt(&fact, &t.question));
            let out = generate(&params, &prompt, 8, DecodeStrategy::Greedy).unwrap();
            if capsule_core::eval::exact_match(&params.vocab.detokenize(&out), &t.answer) {
                fact_hits += 1;
            }
        }
    }
    println!("single-fact accuracy:     {fact_hits}/{n}");
}
