//! Scratch probe: single-fact failure modes.
use capsule_core::datasets::{fact_for_answer, qa_prompt};
use capsule_core::textmodel::load_checkpoint;
use capsule_core::textmodel::model::{generate, DecodeStrategy};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let params = load_checkpoint(&args[0]).unwrap();
    let cfg = capsule_cli::RunConfig::load(std::path::Path::new("configs/desk.json"), &args[1..].to_vec(), None, None).unwrap();
    let manifest = cfg.manifest().unwrap();
    let splits = cfg.splits(&manifest).unwrap();
    for t in splits.test.iter().take(12) {
        if let Some(fact) = fact_for_answer(&t.prompt, &t.answer) {
            let prompt = params.vocab.tokenize(&qa_prompt(&fact, &t.question));
            let out = generate(&params, &prompt, 8, DecodeStrategy::Greedy).unwrap();
            println!("fact: {fact}");
            println!("  gold {:?}  model {:?}", t.answer, params.vocab.detokenize(&out));
        }
    }
}
