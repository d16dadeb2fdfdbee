//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rwr::corpus::{Gazetteer, KBDoc, Letter, ReferenceEmbedder, TextEmbedder};
use rwr::grpo::{compute_advantages, grpo_objective, Averaging, GrpoConfig, Rollout, RolloutGroup};
use rwr::inference::{answer_confidence, cdir, CdirConfig, ConfidenceReport, RolloutConfig, RolloutEngine};
use rwr::pipeline::{evaluate, kmeans, train_two_stage, warm_start, Stage, StageConfig, TrainContext, WarmStartConfig};
use rwr::policy::{sequence_logprobs, Context, PolicyParams, Sampling};
use rwr::protocol::{parse_trajectory, render_trajectory, FormatError, SegmentKind, Trajectory, TrajectoryBuilder};
use rwr::retrieval::{chunk_corpus, chunk_document, search_dense, search_lexical, Bm25Params, DenseIndex, KnowledgeBase, LexicalIndex};
use rwr::rewards::{query_image_reward, query_text_reward, total_reward, RewardBreakdown, RewardConfig, RewardScorer, RewardWeights};
use rwr::synthetic::{generate, SyntheticConfig};
use rwr::vocab::{TokenId, Vocab};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient check
// ---------------------------------------------------------------------------

fn random_group(rng: &mut ChaCha8Rng, theta_old: &PolicyParams, g: usize) -> RolloutGroup {
    let v = theta_old.vocab_size as TokenId;
    let rollouts = (0..g)
        .map(|_| {
            let n = rng.gen_range(3..9);
            let tokens: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..v)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
            let images = if rng.gen_bool(0.5) {
                vec![(0..theta_old.image_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()]
            } else {
                Vec::new()
            };
            let context = Context {
                tokens: (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..v)).collect(),
                images,
            };
            let old_logprobs = sequence_logprobs(theta_old, &context, &tokens);
            Rollout {
                context,
                tokens,
                mask,
                old_logprobs,
                reward: rng.gen_range(0.0..12.0),
            }
        })
        .collect();
    RolloutGroup::new(rollouts)
}

/// Elementwise `|an − fd| / max(|an|, |fd|, 1e-3)`. The floor keeps
/// near-zero entries, where central differences carry ~1e-9 absolute
/// error, from dominating.
fn c1_gradient() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let instances = 24;
    for i in 0..instances {
        let v = rng.gen_range(6..=16);
        let d = rng.gen_range(2..=8);
        let w = rng.gen_range(1..=6);
        let seed = rng.gen();
        let theta_old = PolicyParams::random(v, d, 3, w, 0.8, seed);
        let theta = PolicyParams::random(v, d, 3, w, 0.8, seed + 1);
        let theta_ref = PolicyParams::random(v, d, 3, w, 0.8, seed + 2);
        let group = random_group(&mut rng, &theta_old, 3);
        let cfg = GrpoConfig {
            beta: [1e-3, 0.1, 0.5][i % 3],
            averaging: if i % 2 == 0 { Averaging::Token } else { Averaging::Rollout },
            ..Default::default()
        };
        let obj = grpo_objective(&group, &theta, &theta_ref, &cfg);
        for p in 0..theta.num_params() {
            let x = theta.get_flat(p);
            let mut plus = theta.clone();
            plus.set_flat(p, x + h);
            let mut minus = theta.clone();
            minus.set_flat(p, x - h);
            let fd = (grpo_objective(&group, &plus, &theta_ref, &cfg).j - grpo_objective(&group, &minus, &theta_ref, &cfg).j) / (2.0 * h);
            let an = obj.gradient.get_flat(p);
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{instances} instances, max rel err {worst:.2e} (tol 1e-4), {secs:.1}s (limit 60s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. Advantages
// ---------------------------------------------------------------------------

fn c2_advantages() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let g = rng.gen_range(2..=16);
        let mut rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(-20.0..60.0)).collect();
        if rewards.iter().all(|r| *r == rewards[0]) {
            rewards[0] += 1.0;
        }
        let a = compute_advantages(&rewards, 1e-8);
        let mean = a.iter().sum::<f64>() / g as f64;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    let mut uniform_ok = true;
    for _ in 0..100 {
        let g = rng.gen_range(2..=16);
        let r = rng.gen_range(-20.0..60.0);
        uniform_ok &= compute_advantages(&vec![r; g], 1e-8).iter().all(|a| *a == 0.0);
    }
    outcome(
        worst_mean < 1e-9 && worst_std < 1e-6 && uniform_ok,
        format!("1000 groups: max |mean| {worst_mean:.1e} (tol 1e-9), max |std-1| {worst_std:.1e} (tol 1e-6); uniform groups all-zero: {uniform_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Mask nullity
// ---------------------------------------------------------------------------

fn random_words(rng: &mut ChaCha8Rng, words: &[&str], max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A well-formed segment sequence: think and query/retrieve units in random
/// order, optionally closed by one answer.
fn random_trajectory(rng: &mut ChaCha8Rng, vocab: &Vocab, words: &[&str], prompt: Vec<TokenId>) -> Trajectory {
    let mut b = TrajectoryBuilder::new(prompt, Vec::new());
    for _ in 0..rng.gen_range(0..5) {
        let kinds: &[SegmentKind] = if rng.gen_bool(0.5) {
            &[SegmentKind::Think]
        } else {
            &[SegmentKind::Query, SegmentKind::Retrieve]
        };
        for &k in kinds {
            let mut text = random_words(rng, words, 6);
            if rng.gen_bool(0.2) {
                text = format!(" {text}\n");
            }
            let content = vocab.encode_text(&text);
            b.push_segment(k, text, &content);
        }
    }
    if rng.gen_bool(0.8) {
        let letter = Letter::from_index(rng.gen_range(0..4)).unwrap().to_string();
        let content = vocab.encode_text(&letter);
        b.push_segment(SegmentKind::Answer, letter, &content);
    }
    b.finish()
}

const WORDS: [&str; 12] = ["fever", "rash", "lung", "nodule", "left", "lower", "lobe", "mass", "is", "the", "chest", "film"];

fn c3_mask() -> Outcome {
    let vocab = Vocab::from_texts(WORDS);
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut groups, mut masked_tokens, mut ok) = (0, 0, true);
    for i in 0..200 {
        let theta_old = PolicyParams::random(v, 4, 3, 8, 0.8, i);
        let theta = PolicyParams::random(v, 4, 3, 8, 0.8, i + 1000);
        let theta_ref = PolicyParams::random(v, 4, 3, 8, 0.8, i + 2000);
        let rollouts: Vec<Rollout> = (0..4)
            .map(|_| {
                let prompt = vocab.encode_text(&random_words(&mut rng, &WORDS, 5));
                let t = random_trajectory(&mut rng, &vocab, &WORDS, prompt);
                Rollout::from_trajectory(&t, &theta_old, rng.gen_range(0.0..10.0))
            })
            .collect();
        let retrieve_positions_masked = rollouts.iter().all(|r| r.mask.iter().filter(|m| **m).count() == r.tokens.len() - r.unmasked());
        let group = RolloutGroup::new(rollouts);
        let cfg = GrpoConfig { beta: 0.05, ..Default::default() };
        let base = grpo_objective(&group, &theta, &theta_ref, &cfg);
        let mut zeroed = group.clone();
        let mut perturbed = group.clone();
        for (z, p) in zeroed.rollouts.iter_mut().zip(perturbed.rollouts.iter_mut()) {
            for t in 0..z.tokens.len() {
                if z.mask[t] {
                    masked_tokens += 1;
                    z.old_logprobs[t] = 0.0;
                    p.old_logprobs[t] += rng.gen_range(-5.0..5.0);
                }
            }
        }
        for other in [&zeroed, &perturbed] {
            let o = grpo_objective(other, &theta, &theta_ref, &cfg);
            ok &= o.j.to_bits() == base.j.to_bits() && o.gradient == base.gradient && o.kl.to_bits() == base.kl.to_bits();
        }
        ok &= retrieve_positions_masked;
        groups += 1;
    }
    outcome(
        ok && masked_tokens > 0,
        format!("{groups} groups, {masked_tokens} retrieve positions zeroed/perturbed; objective and gradient bitwise identical: {ok}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Reward oracles
// ---------------------------------------------------------------------------

fn oracle_share(set: &[String], gold: &[String]) -> f64 {
    let set: Vec<&String> = {
        let mut s: Vec<&String> = set.iter().collect();
        s.sort();
        s.dedup();
        s
    };
    if set.is_empty() {
        return 0.0;
    }
    let hits = set.iter().filter(|x| gold.iter().any(|g| g == **x)).count();
    hits as f64 / set.len() as f64
}

#[allow(clippy::approx_constant)]
fn c4_rewards() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let pool: Vec<String> = (0..15).map(|i| format!("e{i}")).collect();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<String> { (0..rng.gen_range(0..7)).map(|_| pool.choose(rng).unwrap().clone()).collect() };
    let mut set_max = 0.0f64;
    for _ in 0..1000 {
        let (q, k, g) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let got = query_text_reward(
            &q.iter().cloned().collect::<BTreeSet<_>>(),
            &k.iter().cloned().collect::<BTreeSet<_>>(),
            &g.iter().cloned().collect::<BTreeSet<_>>(),
        );
        set_max = set_max.max((got - (oracle_share(&q, &g) + oracle_share(&k, &g))).abs());
    }

    let embedder = ReferenceEmbedder::new(24, 5);
    let mut dot_max = 0.0f64;
    for _ in 0..1000 {
        let text = random_words(&mut rng, &WORDS, 5);
        let image: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = embedder.embed(&text);
        let mut direct = 0.0;
        for i in 0..24 {
            direct += e[i] * image[i];
        }
        dot_max = dot_max.max((query_image_reward(&text, &image, &embedder).unwrap() - direct).abs());
    }

    let w = RewardWeights::default();
    let weights_ok = (w.w_f, w.w_a, w.w_q, w.w_c) == (1.0, 5.0, 0.4, 5.0);
    let worked = RewardBreakdown {
        sigma_f: 2,
        sigma_a: 1,
        sigma_q_text: 1.5,
        sigma_c: 0.6931,
        ..Default::default()
    };
    let worked_total = total_reward(&worked, &w);
    let mut total_max = (worked_total - 11.0655).abs();
    for _ in 0..1000 {
        let b = RewardBreakdown {
            sigma_f: rng.gen_range(0..=2),
            sigma_a: rng.gen_range(0..=1),
            sigma_q_text: rng.gen_range(0.0..2.0),
            sigma_q_image: rng.gen_range(-1.0..1.0),
            sigma_c: rng.gen_range(-18.0..18.0),
            total: 0.0,
        };
        let hand = b.sigma_f as f64 + 5.0 * b.sigma_a as f64 + 0.4 * (b.sigma_q_text + b.sigma_q_image) + 5.0 * b.sigma_c;
        total_max = total_max.max((total_reward(&b, &w) - hand).abs());
    }
    outcome(
        set_max == 0.0 && dot_max < 1e-6 && total_max < 1e-9 && weights_ok,
        format!(
            "set oracle max diff {set_max:.1e} (exact), dot max diff {dot_max:.1e} (tol 1e-6), totals max diff {total_max:.1e} (tol 1e-9), worked example {worked_total:.4}, weights (1, 5, 0.4, 5): {weights_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Retrieval oracles
// ---------------------------------------------------------------------------

fn brute_bm25(docs: &[(String, Vec<String>)], query: &[String], k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.1.len()).sum::<usize>() as f64 / n;
    let mut unique: Vec<&String> = query.iter().collect();
    unique.sort();
    unique.dedup();
    let df: Vec<f64> = unique.iter().map(|t| docs.iter().filter(|d| d.1.contains(t)).count() as f64).collect();
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, words)| {
            let mut s = 0.0;
            for (t, &df) in unique.iter().zip(&df) {
                let tf = words.iter().filter(|w| w == t).count() as f64;
                if tf > 0.0 {
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * words.len() as f64 / avg));
                }
            }
            (id.clone(), s)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn c5_retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let lexicon: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
    let (mut lex_ok, mut dense_ok, mut queries) = (true, true, 0);
    for &n_docs in &[10usize, 200, 1000] {
        let docs: Vec<KBDoc> = (0..n_docs)
            .map(|i| {
                let len = rng.gen_range(100..200);
                // skewed term frequencies so some terms are common
                let text = (0..len)
                    .map(|_| lexicon[(rng.gen::<f64>().powi(3) * lexicon.len() as f64) as usize].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                KBDoc { id: format!("d{i:04}"), text }
            })
            .collect();
        let chunks = chunk_corpus(&docs, 100);
        let index = LexicalIndex::from_chunks(&chunks, Bm25Params::default());
        let tokenized: Vec<(String, Vec<String>)> = chunks
            .iter()
            .map(|c| (c.id(), c.text.split(' ').map(String::from).collect()))
            .collect();
        let dim = 16;
        let mut dense = DenseIndex::new(dim);
        let vectors: Vec<(String, Vec<f64>)> = chunks
            .iter()
            .map(|c| (c.id(), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        for (id, v) in &vectors {
            dense.insert(id.clone(), v.clone()).unwrap();
        }
        for _ in 0..100 {
            queries += 1;
            let q: Vec<String> = (0..rng.gen_range(1..5)).map(|_| lexicon.choose(&mut rng).unwrap().clone()).collect();
            let k = rng.gen_range(1..=10);
            let expected = brute_bm25(&tokenized, &q, k);
            match search_lexical(&index, &q.join(" "), k) {
                Ok(got) => {
                    lex_ok &= got.hits.len() == expected.len()
                        && got.hits.iter().zip(&expected).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() < 1e-9);
                }
                Err(_) => lex_ok &= expected.is_empty(),
            }
            let qv: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut brute: Vec<(String, f64)> = vectors
                .iter()
                .map(|(id, v)| {
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (id.clone(), v.iter().zip(&qv).map(|(a, b)| a * b).sum::<f64>() / norm)
                })
                .collect();
            brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            brute.truncate(k);
            let got = search_dense(&dense, &qv, k).unwrap();
            dense_ok &= got.hits.len() == brute.len() && got.hits.iter().zip(&brute).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() < 1e-9);
        }
    }
    let doc = KBDoc {
        id: "long".into(),
        text: (0..250).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" "),
    };
    let counts: Vec<usize> = chunk_document(&doc, 100).iter().map(|c| c.word_count).collect();
    outcome(
        lex_ok && dense_ok && counts == [100, 150],
        format!("{queries} queries on corpora of up to 1000 chunks: BM25 matches brute force: {lex_ok}, dense: {dense_ok}; 250-word chunking {counts:?}"),
    )
}

// ---------------------------------------------------------------------------
// 6. CDIR law
// ---------------------------------------------------------------------------

fn c6_cdir() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let lambda = 0.8;
    let mut law_ok = true;
    for i in 0..10_000 {
        let eta: f64 = match i % 4 {
            0 => rng.gen(),
            1 => lambda + rng.gen_range(-1e-12..1e-12),
            2 => lambda,
            _ => f64::from_bits(lambda.to_bits() - 1 + rng.gen_range(0..3)),
        };
        law_ok &= ConfidenceReport::new(eta, lambda).triggered == (eta < lambda);
    }
    let at_lambda = !ConfidenceReport::new(0.8, 0.8).triggered;

    // the same law through the full re-retrieval call on real rollouts
    let syn = generate(&SyntheticConfig { items: 40, ..Default::default() });
    let vocab = syn.vocab();
    let kb = KnowledgeBase::lexical(chunk_corpus(&syn.kb, 100), Bm25Params::default());
    let engine = RolloutEngine::new(&vocab, &kb, RolloutConfig { max_tokens: 16, max_turns: 1, ..Default::default() });
    let theta = warm_start(
        &PolicyParams::random(vocab.len(), 16, 32, 16, 0.1, 6),
        &syn.qa,
        &engine,
        &WarmStartConfig { steps: 150, ..Default::default() },
    );
    let (mut calls, mut triggered, mut identical, mut untriggered) = (0, 0, true, 0);
    for (i, qa) in syn.qa.iter().enumerate() {
        for s in 0..5u64 {
            let traj = engine.run(&theta, qa, i as u64 * 10 + s);
            let Ok(eta) = answer_confidence(&theta, &traj) else { continue };
            let lambda = if s == 0 { eta } else { rng.gen() };
            let r = cdir(&theta, qa, &traj, &syn.mm, &engine, CdirConfig { lambda, seed: s, ..Default::default() });
            calls += 1;
            law_ok &= r.triggered() == (eta < lambda);
            if r.triggered() {
                triggered += 1;
            } else {
                untriggered += 1;
                identical &= r.final_trajectory == traj && r.original == traj && r.retrieved.is_none() && r.final_answer == traj.predicted_letter();
            }
        }
    }
    outcome(
        law_ok && at_lambda && identical && triggered > 0 && untriggered > 0,
        format!("10000 eta draws at lambda 0.8 plus {calls} rollouts ({triggered} triggered): trigger iff eta < lambda: {law_ok}; eta = 0.8 untriggered: {at_lambda}; untriggered results identical: {identical}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Protocol
// ---------------------------------------------------------------------------

fn c7_protocol() -> Outcome {
    let vocab = Vocab::from_texts(WORDS);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut failures = 0;
    for _ in 0..10_000 {
        let t = random_trajectory(&mut rng, &vocab, &WORDS, Vec::new());
        match parse_trajectory(&render_trajectory(&t), &vocab) {
            Ok(back) if back == t => {}
            _ => failures += 1,
        }
    }
    type Fixture = (&'static str, fn(&FormatError) -> bool);
    let fixtures: [Fixture; 5] = [
        ("<think>open", |e| matches!(e, FormatError::UnclosedTag { .. })),
        ("<think>a</query>", |e| matches!(e, FormatError::InterleavedTags { .. })),
        ("<query>lung</query><answer>A</answer>", |e| matches!(e, FormatError::QueryWithoutRetrieve)),
        ("stray<answer>A</answer>", |e| matches!(e, FormatError::TextOutsideTags { .. })),
        ("<answer>A</answer><answer>B</answer>", |e| matches!(e, FormatError::MultipleAnswers)),
    ];
    let hit: Vec<bool> = fixtures
        .iter()
        .map(|(text, is)| parse_trajectory(text, &vocab).err().as_ref().is_some_and(is))
        .collect();
    let all_hit = hit.iter().all(|h| *h);
    outcome(
        failures == 0 && all_hit,
        format!("10000 round trips, {failures} failures; error classes hit {}/5", hit.iter().filter(|h| **h).count()),
    )
}

// ---------------------------------------------------------------------------
// 8 & 9. Desk-scale training
// ---------------------------------------------------------------------------

fn c8_c9_training() -> (Outcome, Outcome) {
    let start = Instant::now();
    let syn = generate(&SyntheticConfig::default());
    let vocab = syn.vocab();
    let kb = KnowledgeBase::lexical(chunk_corpus(&syn.kb, 100), Bm25Params::default());
    let gazetteer = Gazetteer::new(&syn.gazetteer);
    let embedder = ReferenceEmbedder::new(32, SyntheticConfig::default().seed);
    let ctx = TrainContext {
        vocab: &vocab,
        kb: &kb,
        extractor: &gazetteer,
        embedder: &embedder,
    };
    let seed = 1;
    let rollout = RolloutConfig {
        max_tokens: 16,
        max_turns: 1,
        ..Default::default()
    };
    let sampler = RolloutEngine::new(&vocab, &kb, rollout);
    let greedy = RolloutEngine::new(&vocab, &kb, RolloutConfig { sampling: Sampling::Greedy, ..rollout });

    let text_items: Vec<_> = syn.qa.iter().map(|q| q.text_only()).collect();
    let theta0 = PolicyParams::random(vocab.len(), 32, 32, 16, 0.1, seed);
    let theta0 = warm_start(&theta0, &text_items, &sampler, &WarmStartConfig { seed, ..Default::default() });
    let before = evaluate(&theta0, &syn.qa, &greedy, &syn.mm, None, seed);

    let mut stage1 = StageConfig::new(Stage::TextOnly);
    stage1.iterations = 500;
    stage1.rollout = rollout;
    stage1.seed = seed;
    let mut stage2 = StageConfig::new(Stage::Multimodal);
    stage2.iterations = 1000;
    stage2.rollout = rollout;
    stage2.seed = seed;
    let (theta, _) = train_two_stage(&theta0, &syn.qa, [&stage1, &stage2], &ctx, &[], |_| {}).expect("training runs");
    let after = evaluate(&theta, &syn.qa, &greedy, &syn.mm, None, seed);
    let secs = start.elapsed().as_secs_f64();
    let c8 = outcome(
        before.accuracy <= 0.35 && after.accuracy >= 0.8 && after.retrieval_rate >= 0.7 && secs < 600.0,
        format!(
            "greedy accuracy {:.2} -> {:.2} (need <= 0.35 -> >= 0.8), retrieval rate {:.2} (need >= 0.7), {} + {} iterations, G = {}, {secs:.0}s (limit 600s)",
            before.accuracy, after.accuracy, after.retrieval_rate, stage1.iterations, stage2.iterations, stage2.group_size
        ),
    );

    let reward_cfg = RewardConfig {
        enabled: Stage::Multimodal.rewards(),
        ..Default::default()
    };
    let no_query = RolloutEngine::new(&vocab, &kb, RolloutConfig { max_turns: 0, ..rollout });
    let scorer = RewardScorer::new(reward_cfg, &gazetteer, &embedder, &sampler);
    let (mut gains, mut free, mut free_exact) = (Vec::new(), 0, true);
    for (i, qa) in syn.qa.iter().enumerate() {
        for s in 0..4u64 {
            for engine in [&sampler, &no_query] {
                let traj = engine.run(&theta, qa, 7_000 + i as u64 * 8 + s);
                let b = scorer.score(&theta, qa, &traj, s).expect("scores");
                if traj.has_retrieval() {
                    if traj.predicted_letter() == Some(qa.gold) {
                        gains.push(b.sigma_c);
                    }
                } else {
                    free += 1;
                    free_exact &= b.sigma_c == 0.0;
                }
            }
        }
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len().max(1) as f64;
    let c9 = outcome(
        !gains.is_empty() && mean_gain > 0.0 && free > 0 && free_exact,
        format!(
            "mean confidence gain {mean_gain:.3} over {} correct retrieval rollouts (need > 0); {free} retrieval-free rollouts all exactly 0: {free_exact}",
            gains.len()
        ),
    );
    (c8, c9)
}

// ---------------------------------------------------------------------------
// 10. k-means
// ---------------------------------------------------------------------------

fn c10_kmeans() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut monotone, mut zero_ok, mut mean_err) = (true, true, 0.0f64);
    for i in 0..100 {
        let n = rng.gen_range(2..60);
        let dim = rng.gen_range(1..6);
        let mut v: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        if i % 10 == 0 {
            // duplicated points exercise empty-cluster reseeding
            let copy = v[0].clone();
            v.iter_mut().take(n / 2).for_each(|x| *x = copy.clone());
        }
        let k = rng.gen_range(1..=n);
        let km = kmeans(&v, k, 100, i);
        monotone &= km.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        zero_ok &= kmeans(&v, n, 100, i).objective.abs() < 1e-12;
        let one = kmeans(&v, 1, 100, i);
        for d in 0..dim {
            let mean = v.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            mean_err = mean_err.max((one.centers[0][d] - mean).abs());
        }
    }
    outcome(
        monotone && zero_ok && mean_err < 1e-9,
        format!("100 instances: trace non-increasing: {monotone}; k = n objective 0: {zero_ok}; k = 1 center vs mean max err {mean_err:.1e} (tol 1e-9)"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("[{}] criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "gradient check", c1_gradient());
    report(2, "advantage law", c2_advantages());
    report(3, "mask nullity", c3_mask());
    report(4, "reward oracles", c4_rewards());
    report(5, "retrieval oracles", c5_retrieval());
    report(6, "re-retrieval law", c6_cdir());
    report(7, "protocol", c7_protocol());
    let (c8, c9) = c8_c9_training();
    report(8, "desk-scale learning", c8);
    report(9, "confidence gain", c9);
    report(10, "k-means", c10_kmeans());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
