//! Two-stage training on the synthetic corpus. Prints one JSON record per
//! 25 iterations and the greedy evaluation before and after.

use std::time::Instant;

use rwr::corpus::{Gazetteer, ReferenceEmbedder};
use rwr::inference::{RolloutConfig, RolloutEngine};
use rwr::pipeline::{evaluate, train_two_stage, warm_start, Stage, StageConfig, TrainContext, WarmStartConfig};
use rwr::policy::{PolicyParams, Sampling, DEFAULT_WINDOW};
use rwr::retrieval::{chunk_corpus, Bm25Params, KnowledgeBase};
use rwr::synthetic::{generate, SyntheticConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let start = Instant::now();
    let syn = generate(&SyntheticConfig::default());
    let vocab = syn.vocab();
    let kb = KnowledgeBase::lexical(chunk_corpus(&syn.kb, 100), Bm25Params::default());
    let gaz = Gazetteer::new(&syn.gazetteer);
    let emb = ReferenceEmbedder::new(32, 7);
    let ctx = TrainContext {
        vocab: &vocab,
        kb: &kb,
        extractor: &gaz,
        embedder: &emb,
    };
    let rollout = RolloutConfig {
        max_tokens: 16,
        max_turns: 1,
        ..Default::default()
    };
    let sampler = RolloutEngine::new(&vocab, &kb, rollout);
    let greedy = RolloutEngine::new(&vocab, &kb, RolloutConfig { sampling: Sampling::Greedy, ..rollout });

    let text_items: Vec<_> = syn.qa.iter().map(|q| q.text_only()).collect();
    let theta0 = PolicyParams::random(vocab.len(), 32, 32, DEFAULT_WINDOW, 0.1, seed);
    let theta0 = warm_start(&theta0, &text_items, &sampler, &WarmStartConfig { seed, ..Default::default() });
    let before = evaluate(&theta0, &syn.qa, &greedy, &syn.mm, None, seed);
    eprintln!("before: accuracy {:.3} retrieval {:.3}", before.accuracy, before.retrieval_rate);

    let mut s1 = StageConfig::new(Stage::TextOnly);
    s1.iterations = 500;
    let mut s2 = StageConfig::new(Stage::Multimodal);
    s2.iterations = 1000;
    for s in [&mut s1, &mut s2] {
        s.rollout = rollout;
        s.seed = seed;
    }
    let (theta, _) = train_two_stage(&theta0, &syn.qa, [&s1, &s2], &ctx, &[], |r| {
        if r.iteration % 25 == 0 {
            println!("{}", serde_json::to_string(r).unwrap());
        }
    })
    .expect("training");
    let after = evaluate(&theta, &syn.qa, &greedy, &syn.mm, None, seed);
    eprintln!(
        "after {:.0}s: accuracy {:.3} retrieval {:.3}",
        start.elapsed().as_secs_f64(),
        after.accuracy,
        after.retrieval_rate
    );
}
