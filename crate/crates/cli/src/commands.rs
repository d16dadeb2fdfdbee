use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use rwr::corpus::{load_kb, load_mm, load_qa, write_jsonl, Difficulty, Gazetteer, KBDoc, MMEntry, QAItem, ReferenceEmbedder};
use rwr::grpo::GrpoConfig;
use rwr::inference::{answer_confidence, cdir, CdirConfig, RolloutConfig, RolloutEngine};
use rwr::pipeline::{
    build_environment, evaluate, mix_seed, train_two_stage, warm_start, EnvBuildConfig, Stage, StageConfig, StratifyConfig,
    TrainContext, WarmStartConfig,
};
use rwr::policy::{Checkpoint, PolicyParams, Sampling};
use rwr::protocol::{format_flags, render_trajectory};
use rwr::retrieval::{chunk_corpus, Bm25Params, Chunk, KnowledgeBase, LexicalIndex, RetrievalError, RetrieverKind};
use rwr::rewards::{RewardConfig, RewardWeights};
use rwr::vocab::{corpus_vocab, Vocab};

use crate::config::Config;
use crate::CliError;

const INDEX_FORMAT: &str = "rwr-index";

/// On-disk form written by `kb-index`.
#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    retriever: RetrieverKind,
    min_chunk_words: usize,
    chunks: Vec<Chunk>,
    /// Absent for the dense retriever, whose vectors are recomputed on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lexical: Option<LexicalIndex>,
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("`{key}` is required (flag --{} or config key)", key.replace('_', "-"))))
}

fn emit(out: &mut impl Write, value: &impl Serialize) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn embedder(cfg: &Config) -> ReferenceEmbedder {
    ReferenceEmbedder::new(cfg.image_dim, cfg.text_embed_seed)
}

fn build_kb(cfg: &Config, chunks: Vec<Chunk>) -> KnowledgeBase {
    let mut kb = match cfg.retriever {
        RetrieverKind::Lexical => KnowledgeBase::lexical(chunks, bm25(cfg)),
        RetrieverKind::Dense => KnowledgeBase::dense(chunks, Arc::new(embedder(cfg))),
    };
    kb.dedup_documents = cfg.dedup_documents;
    kb
}

fn bm25(cfg: &Config) -> Bm25Params {
    Bm25Params {
        k1: cfg.bm25_k1,
        b: cfg.bm25_b,
    }
}

/// The knowledge base from `index` if set, else from `kb`, else empty.
fn load_knowledge(cfg: &Config) -> Result<KnowledgeBase, CliError> {
    if let Some(path) = &cfg.index {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let file: IndexFile = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        if file.format != INDEX_FORMAT {
            return Err(CliError::Schema(format!("{}: not an index file", path.display())));
        }
        let mut kb = match (file.retriever, file.lexical) {
            (RetrieverKind::Lexical, Some(index)) => KnowledgeBase::from_lexical_index(file.chunks, index),
            (RetrieverKind::Lexical, None) => return Err(CliError::Schema(format!("{}: lexical index missing", path.display()))),
            (RetrieverKind::Dense, _) => KnowledgeBase::dense(file.chunks, Arc::new(embedder(cfg))),
        };
        kb.dedup_documents = cfg.dedup_documents;
        return Ok(kb);
    }
    let docs = match &cfg.kb {
        Some(p) => load_kb(p)?,
        None => Vec::new(),
    };
    Ok(build_kb(cfg, chunk_corpus(&docs, cfg.min_chunk_words)))
}

fn load_questions(cfg: &Config) -> Result<Vec<QAItem>, CliError> {
    let path = required(&cfg.qa, "qa")?;
    let items = load_qa(path)?;
    for q in &items {
        if let Some(f) = &q.image_feature {
            if f.len() != cfg.image_dim {
                return Err(CliError::Schema(format!(
                    "{}: item `{}` has a {}-dimensional image feature but image_dim is {}",
                    path.display(),
                    q.id,
                    f.len(),
                    cfg.image_dim
                )));
            }
        }
    }
    Ok(items)
}

fn load_multimodal(cfg: &Config) -> Result<Vec<MMEntry>, CliError> {
    match &cfg.mm {
        Some(p) => Ok(load_mm(p)?),
        None => Ok(Vec::new()),
    }
}

fn load_policy(path: &Path) -> Result<(Vocab, PolicyParams), CliError> {
    Checkpoint::load(path).map_err(|e| CliError::from(e).with_path(path))
}

impl CliError {
    fn with_path(self, path: &Path) -> CliError {
        let p = path.display();
        match self {
            CliError::Config(m) => CliError::Config(format!("{p}: {m}")),
            CliError::Schema(m) => CliError::Schema(format!("{p}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{p}: {m}")),
        }
    }
}

fn rollout_config(cfg: &Config) -> RolloutConfig {
    RolloutConfig {
        max_turns: cfg.max_turns,
        max_tokens: cfg.max_tokens,
        top_k: cfg.top_k,
        sampling: Sampling::from_temperature(cfg.temperature),
        seed: cfg.seed,
    }
}

fn cdir_config(cfg: &Config) -> Option<CdirConfig> {
    cfg.cdir.then_some(CdirConfig {
        lambda: cfg.lambda,
        subsample_n: cfg.image_subsample,
        seed: cfg.seed,
    })
}

fn gazetteer(cfg: &Config, qa: &[QAItem]) -> Result<Gazetteer, CliError> {
    match &cfg.gazetteer {
        Some(p) => Ok(Gazetteer::load(p)?),
        None => Ok(Gazetteer::new(qa.iter().flat_map(|q| q.options.values()))),
    }
}

pub fn kb_index(cfg: &Config, out: &mut impl Write) -> Result<(), CliError> {
    let kb_path = required(&cfg.kb, "kb")?;
    let dest = required(&cfg.out, "out")?;
    let docs = load_kb(kb_path)?;
    let chunks = chunk_corpus(&docs, cfg.min_chunk_words);
    let lexical = (cfg.retriever == RetrieverKind::Lexical).then(|| LexicalIndex::from_chunks(&chunks, bm25(cfg)));
    let report = json!({
        "documents": docs.len(),
        "chunks": chunks.len(),
        "retriever": cfg.retriever,
        "avg_chunk_words": lexical.as_ref().map(|l| l.avg_doc_length()),
        "out": dest.display().to_string(),
    });
    let file = IndexFile {
        format: INDEX_FORMAT.into(),
        retriever: cfg.retriever,
        min_chunk_words: cfg.min_chunk_words,
        chunks,
        lexical,
    };
    let text = serde_json::to_string(&file).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(dest, text).map_err(io_err(dest))?;
    emit(out, &report)
}

pub fn kb_search(cfg: &Config, query: &str, out: &mut impl Write) -> Result<(), CliError> {
    if cfg.index.is_none() && cfg.kb.is_none() {
        return Err(CliError::Config("`kb` or `index` is required".into()));
    }
    let kb = load_knowledge(cfg)?;
    let hits = match kb.search(query, cfg.top_k) {
        Ok(hits) => hits,
        Err(RetrievalError::EmptyQuery) => {
            log::warn!("query shares no term with the knowledge base");
            Vec::new()
        }
        Err(e) => return Err(CliError::Runtime(e.to_string())),
    };
    for (rank, (chunk, score)) in hits.iter().enumerate() {
        emit(
            out,
            &json!({"rank": rank + 1, "id": chunk.id(), "doc_id": chunk.doc_id, "score": score, "text": chunk.text}),
        )?;
    }
    Ok(())
}

pub fn env_build(cfg: &Config, out: &mut impl Write) -> Result<(), CliError> {
    let qa = load_questions(cfg)?;
    let dest = required(&cfg.out, "out")?;
    if cfg.evaluators.is_empty() {
        return Err(CliError::Config("`evaluators` needs at least one checkpoint".into()));
    }
    let mut evaluators = Vec::new();
    let mut vocab: Option<Vocab> = None;
    for path in &cfg.evaluators {
        let (v, p) = load_policy(path)?;
        match &vocab {
            Some(first) if first.tokens() != v.tokens() => {
                return Err(CliError::Schema(format!("{}: evaluators must share one vocabulary", path.display())));
            }
            Some(_) => {}
            None => vocab = Some(v),
        }
        evaluators.push(p);
    }
    let vocab = vocab.expect("at least one evaluator");
    let kb = load_knowledge(cfg)?;
    let engine = RolloutEngine::new(&vocab, &kb, rollout_config(cfg));
    let env_cfg = EnvBuildConfig {
        k_clusters: cfg.k_clusters,
        kmeans_iters: cfg.kmeans_iters,
        per_cluster: cfg.per_cluster,
        stratify: StratifyConfig {
            samples_per_question: cfg.samples_per_question,
            easy_threshold: cfg.easy_threshold,
            seed: cfg.seed,
            vote: cfg.vote,
        },
        seed: cfg.seed,
    };
    let refs: Vec<&PolicyParams> = evaluators.iter().collect();
    let env = build_environment(&qa, &refs, &engine, &env_cfg);
    write_jsonl(dest, &env.items).map_err(io_err(dest))?;
    let count = |d| env.items.iter().filter(|q| q.difficulty == Some(d)).count();
    emit(
        out,
        &json!({
            "input": qa.len(),
            "retained": env.items.len(),
            "easy": count(Difficulty::Easy),
            "difficult": count(Difficulty::Difficult),
            "removed": env.removed,
            "clusters": env.clustering.as_ref().map(|k| k.centers.len()),
            "out": dest.display().to_string(),
        }),
    )
}

fn stage_config(cfg: &Config, stage: Stage) -> StageConfig {
    let (iterations, lr) = match stage {
        Stage::TextOnly => (cfg.stage1_iterations, cfg.stage1_lr),
        Stage::Multimodal => (cfg.stage2_iterations, cfg.stage2_lr),
    };
    StageConfig {
        stage,
        iterations,
        group_size: cfg.group_size,
        batch_size: cfg.batch_size,
        inner_steps: cfg.inner_steps,
        grpo: GrpoConfig {
            clip_eps: cfg.clip_eps,
            beta: cfg.beta,
            lr,
            averaging: cfg.averaging,
            optimizer: cfg.optimizer,
            ..Default::default()
        },
        rollout: rollout_config(cfg),
        reward: RewardConfig {
            weights: RewardWeights {
                w_f: cfg.w_f,
                w_a: cfg.w_a,
                w_q: cfg.w_q,
                w_c: cfg.w_c,
            },
            enabled: stage.rewards(),
            entity_source: cfg.entity_source,
            image_query_source: cfg.image_query_source,
            counterfactual: cfg.counterfactual,
        },
        probe_every: cfg.probe_every,
        seed: cfg.seed,
    }
}

pub fn train(cfg: &Config, out: &mut impl Write) -> Result<(), CliError> {
    let qa = load_questions(cfg)?;
    let dest = required(&cfg.checkpoint, "checkpoint")?;
    let kb = load_knowledge(cfg)?;
    let gaz = gazetteer(cfg, &qa)?;
    let emb = embedder(cfg);
    let rollout = rollout_config(cfg);

    let (vocab, theta) = match &cfg.init_checkpoint {
        Some(path) => load_policy(path)?,
        None => {
            let docs: Vec<KBDoc> = kb
                .chunks()
                .iter()
                .map(|c| KBDoc {
                    id: c.id(),
                    text: c.text.clone(),
                })
                .collect();
            let vocab = corpus_vocab(&qa, &docs);
            let theta = PolicyParams::random(vocab.len(), cfg.embed_dim, cfg.image_dim, cfg.window, cfg.init_scale, cfg.seed);
            let engine = RolloutEngine::new(&vocab, &kb, rollout);
            let text_items: Vec<QAItem> = qa.iter().map(QAItem::text_only).collect();
            let ws = WarmStartConfig {
                steps: cfg.warm_steps,
                batch_size: cfg.warm_batch,
                lr: cfg.warm_lr,
                seed: cfg.seed,
            };
            let theta = warm_start(&theta, &text_items, &engine, &ws);
            (vocab, theta)
        }
    };
    if theta.image_dim != cfg.image_dim {
        return Err(CliError::Schema(format!(
            "initial checkpoint has image dimension {}, config image_dim is {}",
            theta.image_dim, cfg.image_dim
        )));
    }
    let ctx = TrainContext {
        vocab: &vocab,
        kb: &kb,
        extractor: &gaz,
        embedder: &emb,
    };
    let s1 = stage_config(cfg, Stage::TextOnly);
    let s2 = stage_config(cfg, Stage::Multimodal);
    let probe: &[QAItem] = if cfg.probe_every > 0 { &qa } else { &[] };
    let mut write_err = None;
    let (theta, report) = train_two_stage(&theta, &qa, [&s1, &s2], &ctx, probe, |r| {
        if write_err.is_none() {
            write_err = emit(out, r).err();
        }
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log::info!("{} training iterations", report.records.len());
    Checkpoint::new(&vocab, theta).save(dest).map_err(|e| CliError::from(e).with_path(dest))
}

pub fn rollout(cfg: &Config, id: Option<&str>, out: &mut impl Write) -> Result<(), CliError> {
    let qa = load_questions(cfg)?;
    let (vocab, theta) = load_policy(required(&cfg.checkpoint, "checkpoint")?)?;
    let kb = load_knowledge(cfg)?;
    let mm = load_multimodal(cfg)?;
    let engine = RolloutEngine::new(&vocab, &kb, rollout_config(cfg));
    let selected: Vec<(usize, &QAItem)> = qa.iter().enumerate().filter(|(_, q)| id.is_none_or(|id| q.id == id)).collect();
    if let (Some(id), true) = (id, selected.is_empty()) {
        return Err(CliError::Runtime(format!("no question with id `{id}`")));
    }
    for (i, q) in selected {
        let traj = engine.run(&theta, q, mix_seed(&[cfg.seed, i as u64]));
        writeln!(out, "{}", render_trajectory(&traj)).map_err(|e| CliError::Runtime(format!("stdout: {e}")))?;
        let report = match cdir_config(cfg) {
            Some(c) => {
                let r = cdir(&theta, q, &traj, &mm, &engine, CdirConfig {
                    seed: mix_seed(&[c.seed, i as u64]),
                    ..c
                });
                if r.triggered() {
                    writeln!(out, "{}", render_trajectory(&r.final_trajectory)).map_err(|e| CliError::Runtime(format!("stdout: {e}")))?;
                }
                json!({
                    "id": q.id,
                    "gold": q.gold.to_string(),
                    "predicted": r.original.predicted_letter().map(|l| l.to_string()),
                    "confidence": r.confidence,
                    "cdir_triggered": r.triggered(),
                    "retrieved": r.retrieved.as_ref().map(|m| &m.id),
                    "final_answer": r.final_answer.map(|l| l.to_string()),
                    "retrieval": format_flags(&r.final_trajectory).retrieval_activated,
                })
            }
            None => json!({
                "id": q.id,
                "gold": q.gold.to_string(),
                "predicted": traj.predicted_letter().map(|l| l.to_string()),
                "eta": answer_confidence(&theta, &traj).ok(),
                "retrieval": format_flags(&traj).retrieval_activated,
            }),
        };
        emit(out, &report)?;
    }
    Ok(())
}

pub fn eval(cfg: &Config, per_item: bool, out: &mut impl Write) -> Result<(), CliError> {
    let qa = load_questions(cfg)?;
    let (vocab, theta) = load_policy(required(&cfg.checkpoint, "checkpoint")?)?;
    let kb = load_knowledge(cfg)?;
    let mm = load_multimodal(cfg)?;
    let engine = RolloutEngine::new(&vocab, &kb, rollout_config(cfg));
    let report = evaluate(&theta, &qa, &engine, &mm, cdir_config(cfg), cfg.seed);
    if per_item {
        for item in &report.items {
            emit(out, item)?;
        }
    }
    emit(
        out,
        &json!({
            "n": report.n,
            "correct": report.correct,
            "accuracy": report.accuracy,
            "retrieval_rate": report.retrieval_rate,
            "cdir": cfg.cdir,
            "cdir_trigger_rate": report.cdir_trigger_rate,
            "mean_eta": report.mean_eta,
        }),
    )
}
