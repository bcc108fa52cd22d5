//! Scratch: why are train steps skipped in the tiny fixture?
use capsule_core::compression::{summarize_generate, CompressionOpts, InstructionSet};
use capsule_core::datasets::{qa_prompt, synth_corpus, SynthKind};
use capsule_core::reward::LengthBudget;
use capsule_core::textmodel::model::DecodeStrategy;
use capsule_core::textmodel::{ModelConfig, ModelParams, Vocabulary};
use capsule_core::trainer::{build_pretrain_samples, pretrain_loop, PretrainConfig};

fn main() {
    let manifest = synth_corpus(SynthKind::ArithCot, 24, 5).unwrap();
    let instr = InstructionSet::fewshot_default();
    let mut texts: Vec<String> = manifest
        .records
        .iter()
        .flat_map(|r| [r.prompt.clone(), r.question.clone(), r.answer.clone(), qa_prompt("", "")])
        .collect();
    texts.push(instr.t_rep.clone());
    texts.push(instr.summ_with_budget(24));
    let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
    let vocab = Vocabulary::build(&refs);
    let mut params = ModelParams::init(
        ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, context_window: 320, seed: 7 },
        vocab,
    )
    .unwrap();
    let splits = capsule_core::datasets::split(&manifest, 5).unwrap();
    let samples = build_pretrain_samples(&splits.train, &params, &instr, LengthBudget::new(16));
    println!("pretrain samples: {}", samples.len());
    let losses = pretrain_loop(&mut params, &samples, &PretrainConfig {
        steps: 2000, learning_rate: 3e-3, grad_clip_norm: 1.0, seed: 3, final_lr_fraction: 1.0,
    }).unwrap();
    println!("final pretrain loss {:.3}", losses.last().unwrap());
    for t in splits.train.iter().take(3) {
        let k = params.vocab.tokenize(&t.prompt);
        let gen = summarize_generate(&params, &k, &instr, 16, DecodeStrategy::Greedy, &CompressionOpts::default()).unwrap();
        println!("capsule len {}: {:?}", gen.capsule.len(), params.vocab.detokenize(&gen.capsule));
    }
}
