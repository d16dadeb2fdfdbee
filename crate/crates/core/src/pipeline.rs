//! Environment construction (clustering, representative selection,
//! difficulty stratification), the two-stage training driver, and
//! benchmark evaluation.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Difficulty, EntityExtractor, MMEntry, QAItem, TextEmbedder};
use crate::grpo::{batch_objective, policy_step, Adam, GrpoConfig, Optimizer, Rollout, RolloutGroup};
use crate::inference::{answer_confidence, cdir, CdirConfig, RolloutConfig, RolloutEngine};
use crate::policy::{PolicyParams, Sampling};
use crate::protocol::format_flags;
use crate::retrieval::KnowledgeBase;
use crate::rewards::{RewardBreakdown, RewardConfig, RewardError, RewardScorer, RewardSet};
use crate::vocab::Vocab;

/// SplitMix64 finalizer, used to derive independent per-rollout seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every assignment step.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(v: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(v, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from `k` distinct seeded-random initial points. An
/// emptied cluster is reseeded with the point farthest from its center.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> KMeans {
    assert!(k >= 1 && vectors.len() >= k, "need at least k vectors");
    let dim = vectors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = sample(&mut rng, vectors.len(), k).iter().map(|i| vectors[i].clone()).collect();
    let mut assignments = vec![usize::MAX; vectors.len()];
    let mut trace = Vec::new();
    for _ in 0..iters.max(1) {
        let assigned: Vec<(usize, f64)> = vectors.par_iter().map(|v| nearest(v, &centers)).collect();
        let changed = assigned.iter().zip(&assignments).any(|((c, _), a)| c != a);
        assignments = assigned.iter().map(|(c, _)| *c).collect();
        trace.push(assigned.iter().map(|(_, d)| d).sum());
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &c) in vectors.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(v) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..vectors.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&vectors[a], &centers[assignments[a]]);
                        let db = sq_dist(&vectors[b], &centers[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                counts[assignments[far]] -= 1;
                centers[c] = vectors[far].clone();
                assignments[far] = c;
                counts[c] = 1;
            }
        }
    }
    let objective = vectors.iter().zip(&assignments).map(|(v, &c)| sq_dist(v, &centers[c])).sum();
    trace.push(objective);
    KMeans {
        assignments,
        centers,
        objective,
        trace,
    }
}

/// Per cluster, the `per_cluster` members nearest the center (ties by
/// ascending index). The result is sorted.
pub fn select_representatives(vectors: &[Vec<f64>], assignments: &[usize], centers: &[Vec<f64>], per_cluster: usize) -> Vec<usize> {
    let mut members: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for (i, (v, &c)) in vectors.iter().zip(assignments).enumerate() {
        members.entry(c).or_default().push((sq_dist(v, &centers[c]), i));
    }
    let mut out: Vec<usize> = members
        .into_values()
        .flat_map(|mut m| {
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            m.into_iter().take(per_cluster).map(|(_, i)| i)
        })
        .collect();
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// Stratification
// ---------------------------------------------------------------------------

/// How accuracies of several evaluators are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// One accuracy over all evaluators' samples.
    #[default]
    Pooled,
    /// Trivial only if trivial for every evaluator; easy only if easy for every evaluator.
    Intersection,
}

impl std::str::FromStr for VoteMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "intersection" => Ok(Self::Intersection),
            _ => Err(format!("unknown vote mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratifyConfig {
    pub samples_per_question: usize,
    pub easy_threshold: f64,
    pub seed: u64,
    pub vote: VoteMode,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        StratifyConfig {
            samples_per_question: 10,
            easy_threshold: 0.5,
            seed: 0,
            vote: VoteMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratified {
    pub id: String,
    /// Accuracy per evaluator.
    pub accuracies: Vec<f64>,
    /// `None` when removed as trivial.
    pub label: Option<Difficulty>,
}

/// Labels from per-evaluator accuracies.
pub fn label_from_accuracies(accuracies: &[f64], threshold: f64, vote: VoteMode) -> Option<Difficulty> {
    let (trivial, easy) = match vote {
        VoteMode::Pooled => {
            let pooled = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            (pooled >= 1.0, pooled >= threshold)
        }
        VoteMode::Intersection => (
            accuracies.iter().all(|&a| a >= 1.0),
            accuracies.iter().all(|&a| a >= threshold),
        ),
    };
    if trivial {
        None
    } else if easy {
        Some(Difficulty::Easy)
    } else {
        Some(Difficulty::Difficult)
    }
}

/// Samples `n` answers per evaluator per question and labels each item.
pub fn stratify(qa: &[QAItem], evaluators: &[&PolicyParams], engine: &RolloutEngine<'_>, cfg: &StratifyConfig) -> Vec<Stratified> {
    assert!(!evaluators.is_empty(), "at least one evaluator is required");
    let n = cfg.samples_per_question.max(1);
    qa.par_iter()
        .enumerate()
        .map(|(i, item)| {
            let accuracies: Vec<f64> = evaluators
                .iter()
                .enumerate()
                .map(|(e, theta)| {
                    let correct = (0..n)
                        .filter(|&s| {
                            let seed = mix_seed(&[cfg.seed, i as u64, e as u64, s as u64]);
                            engine.run(theta, item, seed).predicted_letter() == Some(item.gold)
                        })
                        .count();
                    correct as f64 / n as f64
                })
                .collect();
            Stratified {
                id: item.id.clone(),
                label: label_from_accuracies(&accuracies, cfg.easy_threshold, cfg.vote),
                accuracies,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvBuildConfig {
    pub k_clusters: usize,
    pub kmeans_iters: usize,
    pub per_cluster: usize,
    pub stratify: StratifyConfig,
    pub seed: u64,
}

impl Default for EnvBuildConfig {
    fn default() -> Self {
        EnvBuildConfig {
            k_clusters: 8,
            kmeans_iters: 50,
            per_cluster: 4,
            stratify: StratifyConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    /// Retained items with their difficulty label set.
    pub items: Vec<QAItem>,
    pub removed: Vec<String>,
    pub clustering: Option<KMeans>,
}

/// Cluster → select → stratify. Items with image features are clustered and
/// only representatives kept; text-only items all go straight to
/// stratification.
pub fn build_environment(qa: &[QAItem], evaluators: &[&PolicyParams], engine: &RolloutEngine<'_>, cfg: &EnvBuildConfig) -> Environment {
    let with_image: Vec<usize> = (0..qa.len()).filter(|&i| qa[i].image_feature.is_some()).collect();
    let mut keep: Vec<usize> = (0..qa.len()).filter(|&i| qa[i].image_feature.is_none()).collect();
    let mut clustering = None;
    if !with_image.is_empty() {
        let vectors: Vec<Vec<f64>> = with_image.iter().map(|&i| qa[i].image_feature.clone().unwrap()).collect();
        let km = kmeans(&vectors, cfg.k_clusters.min(vectors.len()), cfg.kmeans_iters, cfg.seed);
        let reps = select_representatives(&vectors, &km.assignments, &km.centers, cfg.per_cluster);
        keep.extend(reps.into_iter().map(|r| with_image[r]));
        clustering = Some(km);
    }
    keep.sort_unstable();
    let selected: Vec<QAItem> = keep.iter().map(|&i| qa[i].clone()).collect();
    let labels = stratify(&selected, evaluators, engine, &cfg.stratify);
    let mut items = Vec::new();
    let mut removed = Vec::new();
    for (mut item, s) in selected.into_iter().zip(labels) {
        match s.label {
            Some(d) => {
                item.difficulty = Some(d);
                items.push(item);
            }
            None => removed.push(item.id),
        }
    }
    Environment { items, removed, clustering }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextOnly,
    Multimodal,
}

impl Stage {
    pub fn rewards(self) -> RewardSet {
        match self {
            Stage::TextOnly => RewardSet::TEXT_STAGE,
            Stage::Multimodal => RewardSet::ALL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub group_size: usize,
    /// Prompts per iteration.
    pub batch_size: usize,
    /// Gradient steps per sampled batch.
    pub inner_steps: usize,
    pub grpo: GrpoConfig,
    pub rollout: RolloutConfig,
    pub reward: RewardConfig,
    /// Probe accuracy is measured every this many iterations (0 = never).
    pub probe_every: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        StageConfig {
            stage,
            iterations: 100,
            group_size: 8,
            batch_size: 32,
            inner_steps: 1,
            grpo: GrpoConfig {
                lr: match stage {
                    Stage::TextOnly => 0.03,
                    Stage::Multimodal => 0.003,
                },
                ..Default::default()
            },
            rollout: RolloutConfig::default(),
            reward: RewardConfig {
                enabled: stage.rewards(),
                ..Default::default()
            },
            probe_every: 0,
            seed: 0,
        }
    }
}

/// One training iteration's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_sigma_f: f64,
    pub mean_sigma_a: f64,
    pub mean_sigma_q: f64,
    pub mean_sigma_c: f64,
    pub objective: f64,
    pub kl: f64,
    /// Policy-generated tokens per rollout.
    pub mean_completion_len: f64,
    pub retrieval_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Shared resources for training and evaluation.
pub struct TrainContext<'a> {
    pub vocab: &'a Vocab,
    pub kb: &'a KnowledgeBase,
    pub extractor: &'a dyn EntityExtractor,
    pub embedder: &'a dyn TextEmbedder,
}

/// Item order for one pass: shuffled, and for the multimodal stage Easy items
/// (and unlabeled ones) before Difficult ones.
pub fn curriculum_order(dataset: &[QAItem], stage: Stage, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut easy: Vec<usize> = Vec::new();
    let mut hard: Vec<usize> = Vec::new();
    for (i, q) in dataset.iter().enumerate() {
        if stage == Stage::Multimodal && q.difficulty == Some(Difficulty::Difficult) {
            hard.push(i);
        } else {
            easy.push(i);
        }
    }
    easy.shuffle(rng);
    hard.shuffle(rng);
    easy.extend(hard);
    easy
}

/// Runs one training stage. The reference policy is the stage's starting
/// point; the sampling policy is refreshed every iteration.
pub fn train_stage(
    theta: &PolicyParams,
    dataset: &[QAItem],
    cfg: &StageConfig,
    ctx: &TrainContext<'_>,
    probe: &[QAItem],
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<(PolicyParams, TrainReport), RewardError> {
    let mut theta = theta.clone();
    let mut report = TrainReport::default();
    if cfg.iterations == 0 || dataset.is_empty() {
        return Ok((theta, report));
    }
    let items: Vec<QAItem> = match cfg.stage {
        Stage::TextOnly => dataset.iter().map(QAItem::text_only).collect(),
        Stage::Multimodal => dataset.to_vec(),
    };
    let theta_ref = theta.clone();
    let engine = RolloutEngine::new(ctx.vocab, ctx.kb, cfg.rollout);
    let reward_cfg = RewardConfig {
        enabled: cfg.stage.rewards(),
        ..cfg.reward
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = Adam::new(&theta);

    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(items.len()) {
            if cursor == order.len() {
                order = curriculum_order(&items, cfg.stage, &mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let scorer = RewardScorer::new(reward_cfg, ctx.extractor, ctx.embedder, &engine);
        let jobs: Vec<(usize, usize)> = batch.iter().flat_map(|&b| (0..cfg.group_size).map(move |g| (b, g))).collect();
        let sampled: Vec<(Rollout, RewardBreakdown, usize, bool)> = jobs
            .par_iter()
            .map(|&(b, g)| {
                let seed = mix_seed(&[cfg.seed, iteration as u64, b as u64, g as u64]);
                let traj = engine.run(&theta, &items[b], seed);
                let reward = scorer.score(&theta, &items[b], &traj, seed ^ 1)?;
                let rollout = Rollout::from_trajectory(&traj, &theta, reward.total);
                let generated = rollout.unmasked();
                Ok((rollout, reward, generated, format_flags(&traj).retrieval_activated))
            })
            .collect::<Result<_, RewardError>>()?;

        let n = sampled.len() as f64;
        let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| sampled.iter().map(|s| f(&s.1)).sum::<f64>() / n;
        let mut record = TrainRecord {
            stage: cfg.stage,
            iteration,
            mean_reward: mean(&|b| b.total),
            mean_sigma_f: mean(&|b| b.sigma_f as f64),
            mean_sigma_a: mean(&|b| b.sigma_a as f64),
            mean_sigma_q: mean(&|b| b.sigma_q()),
            mean_sigma_c: mean(&|b| b.sigma_c),
            objective: 0.0,
            kl: 0.0,
            mean_completion_len: sampled.iter().map(|s| s.2 as f64).sum::<f64>() / n,
            retrieval_rate: sampled.iter().filter(|s| s.3).count() as f64 / n,
            probe_accuracy: None,
        };

        let groups: Vec<RolloutGroup> = sampled
            .chunks(cfg.group_size)
            .map(|c| RolloutGroup::new(c.iter().map(|s| s.0.clone()).collect()))
            .collect();
        for step in 0..cfg.inner_steps.max(1) {
            let obj = batch_objective(&groups, &theta, &theta_ref, &cfg.grpo);
            if step == 0 {
                record.objective = obj.j;
                record.kl = obj.kl;
            }
            match cfg.grpo.optimizer {
                Optimizer::Sgd => theta = policy_step(&theta, &obj.gradient, cfg.grpo.lr),
                Optimizer::Adam => adam.step(&mut theta, &obj.gradient, cfg.grpo.lr),
            }
        }

        if cfg.probe_every > 0 && !probe.is_empty() && (iteration + 1) % cfg.probe_every == 0 {
            let probe_engine = RolloutEngine::new(
                ctx.vocab,
                ctx.kb,
                RolloutConfig {
                    sampling: Sampling::Greedy,
                    ..cfg.rollout
                },
            );
            record.probe_accuracy = Some(evaluate(&theta, probe, &probe_engine, &[], None, cfg.seed).accuracy);
        }
        on_record(&record);
        report.records.push(record);
    }
    Ok((theta, report))
}

/// Text-only stage followed by the multimodal stage, the second starting
/// from the first's output. Records of both stages are concatenated.
pub fn train_two_stage(
    theta: &PolicyParams,
    dataset: &[QAItem],
    stages: [&StageConfig; 2],
    ctx: &TrainContext<'_>,
    probe: &[QAItem],
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<(PolicyParams, TrainReport), RewardError> {
    let mut theta = theta.clone();
    let mut report = TrainReport::default();
    for cfg in stages {
        let (t, r) = train_stage(&theta, dataset, cfg, ctx, probe, &mut on_record)?;
        theta = t;
        report.records.extend(r.records);
    }
    Ok((theta, report))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub retrieval: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub cdir_triggered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub retrieval_rate: f64,
    pub cdir_trigger_rate: f64,
    /// Mean answer confidence over items that produced an answer.
    pub mean_eta: f64,
    pub items: Vec<EvalItem>,
}

/// One seeded rollout per item, optionally followed by a CDIR pass.
pub fn evaluate(
    theta: &PolicyParams,
    benchmark: &[QAItem],
    engine: &RolloutEngine<'_>,
    mm_corpus: &[MMEntry],
    cdir_cfg: Option<CdirConfig>,
    seed: u64,
) -> EvalReport {
    let items: Vec<EvalItem> = benchmark
        .par_iter()
        .enumerate()
        .map(|(i, qa)| {
            let traj = engine.run(theta, qa, mix_seed(&[seed, i as u64]));
            let eta = answer_confidence(theta, &traj).ok();
            let (final_traj, triggered) = match cdir_cfg {
                Some(c) => {
                    let c = CdirConfig {
                        seed: mix_seed(&[c.seed, i as u64]),
                        ..c
                    };
                    let r = cdir(theta, qa, &traj, mm_corpus, engine, c);
                    let t = r.triggered();
                    (r.final_trajectory, t)
                }
                None => (traj, false),
            };
            let predicted = final_traj.predicted_letter();
            EvalItem {
                id: qa.id.clone(),
                predicted: predicted.map(|l| l.to_string()),
                gold: qa.gold.to_string(),
                correct: predicted == Some(qa.gold),
                retrieval: format_flags(&final_traj).retrieval_activated,
                eta,
                cdir_triggered: triggered,
            }
        })
        .collect();
    let n = items.len();
    let frac = |f: &dyn Fn(&EvalItem) -> bool| {
        if n == 0 {
            0.0
        } else {
            items.iter().filter(|i| f(i)).count() as f64 / n as f64
        }
    };
    let etas: Vec<f64> = items.iter().filter_map(|i| i.eta).collect();
    let correct = items.iter().filter(|i| i.correct).count();
    EvalReport {
        n,
        correct,
        accuracy: frac(&|i| i.correct),
        retrieval_rate: frac(&|i| i.retrieval),
        cdir_trigger_rate: frac(&|i| i.cdir_triggered),
        mean_eta: if etas.is_empty() { 0.0 } else { etas.iter().sum::<f64>() / etas.len() as f64 },
        items,
    }
}

// ---------------------------------------------------------------------------
// Format warm start
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            steps: 800,
            batch_size: 32,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// A content-free demonstration of the tag protocol for `qa`: an empty
/// think, one query holding a uniformly drawn in-vocabulary question word,
/// the knowledge base's answer to it, and a uniformly drawn option letter.
/// Returns the trajectory and per-token imitation weights.
pub fn format_demonstration(qa: &QAItem, engine: &RolloutEngine<'_>, rng: &mut ChaCha8Rng) -> (crate::protocol::Trajectory, Vec<f64>) {
    use crate::protocol::{SegmentKind, TrajectoryBuilder};
    use crate::vocab::{letter_id, OOV};

    let words: Vec<u32> = engine.vocab.encode_text(&qa.question).into_iter().filter(|&t| t != OOV).collect();
    let mut b = TrajectoryBuilder::new(engine.prompt_tokens(qa), qa.image_feature.iter().cloned().collect());
    b.push_segment(SegmentKind::Think, "", &[]);
    if let Some(&w) = words.choose(rng) {
        let text = engine.vocab.token_str(w).to_string();
        b.push_segment(SegmentKind::Query, text.clone(), &[w]);
        let payload = engine.kb.payload(&text, engine.cfg.top_k);
        b.push_segment(SegmentKind::Retrieve, payload.clone(), &engine.vocab.encode_text(&payload));
    }
    let letter = *qa.options.keys().collect::<Vec<_>>().choose(rng).unwrap();
    b.push_segment(SegmentKind::Answer, letter.to_string(), &[letter_id(*letter)]);
    let traj = b.finish();
    let weights = traj.loss_mask().iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    (traj, weights)
}

/// Imitation of [`format_demonstration`]s with Adam on the mean token
/// log-likelihood. Teaches the tag protocol only: query terms and answer
/// letters are drawn independently of the gold answer.
pub fn warm_start(theta: &PolicyParams, dataset: &[QAItem], engine: &RolloutEngine<'_>, cfg: &WarmStartConfig) -> PolicyParams {
    use crate::policy::{accumulate_grad, Context};

    let mut theta = theta.clone();
    if dataset.is_empty() {
        return theta;
    }
    let mut adam = Adam::new(&theta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.steps {
        let demos: Vec<_> = (0..cfg.batch_size)
            .map(|_| format_demonstration(dataset.choose(&mut rng).unwrap(), engine, &mut rng))
            .collect();
        let total: f64 = demos.iter().map(|(_, w)| w.iter().sum::<f64>()).sum();
        let grad = demos
            .par_iter()
            .map(|(t, w)| {
                let ctx = Context {
                    tokens: t.prompt_tokens.clone(),
                    images: t.images.clone(),
                };
                let w: Vec<f64> = w.iter().map(|x| x / total).collect();
                let mut g = theta.zeros_like();
                accumulate_grad(&theta, &ctx, &t.tokens, &w, &mut g);
                g
            })
            .reduce(
                || theta.zeros_like(),
                |mut a, b| {
                    a.axpy(1.0, &b);
                    a
                },
            );
        adam.step(&mut theta, &grad, cfg.lr);
    }
    theta
}
