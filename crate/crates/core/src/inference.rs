//! Think–query–retrieve–answer rollouts, answer confidence, and
//! confidence-driven image re-retrieval (CDIR).
//!
//! The environment owns retrieval: whenever the policy closes a query the
//! engine searches the knowledge base and injects the payload as a
//! loss-masked `<retrieve>` segment before generation resumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Letter, MMEntry, QAItem};
use crate::policy::{sample_token, PolicyParams, Sampling, Scorer};
use crate::protocol::{FormatError, Grammar, SegmentKind, Trajectory, TrajectoryBuilder};
use crate::retrieval::{search_image, KnowledgeBase, RetrievalError, DEFAULT_TOP_K};
use crate::vocab::{classify, letter_id, tag_id, TokenClass, TokenId, Vocab};

pub const DEFAULT_LAMBDA: f64 = 0.8;
pub const DEFAULT_IMAGE_SUBSAMPLE: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("trajectory has no answer token")]
    NoAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Query cycles allowed before further queries are suppressed.
    pub max_turns: usize,
    /// Policy-generated tokens allowed (retrieved tokens do not count).
    pub max_tokens: usize,
    pub top_k: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_turns: 4,
            max_tokens: 48,
            top_k: DEFAULT_TOP_K,
            sampling: Sampling::Temperature(1.0),
            seed: 0,
        }
    }
}

const INSTRUCTIONS: &str = "You are a medical expert answering a multiple-choice question about an image. \
Reason step by step inside <think> </think> tags. When you need medical knowledge, write a search \
query inside <query> </query> tags, at most one query per turn. Retrieved documents are returned \
inside <retrieve> </retrieve> tags; you may keep reasoning and query again afterwards. Give the \
final option letter inside <answer> </answer> tags. Read the choices and the question below with care.";

/// Prompt text: instructions, then the choices, then the question.
pub fn render_prompt(qa: &QAItem) -> String {
    let choices = qa
        .options
        .iter()
        .map(|(l, t)| format!("{l}) {t}"))
        .collect::<Vec<_>>()
        .join(" ");
    format!("{INSTRUCTIONS}\nChoices: {choices}\nQuestion: {}", qa.question)
}

/// Rollout driver over a fixed vocabulary and knowledge base.
pub struct RolloutEngine<'a> {
    pub vocab: &'a Vocab,
    pub kb: &'a KnowledgeBase,
    pub cfg: RolloutConfig,
}

struct GenState {
    builder: TrajectoryBuilder,
    grammar: Grammar,
    queries: usize,
    policy_tokens: usize,
    stream: Vec<TokenId>,
}

impl<'a> RolloutEngine<'a> {
    pub fn new(vocab: &'a Vocab, kb: &'a KnowledgeBase, cfg: RolloutConfig) -> Self {
        RolloutEngine { vocab, kb, cfg }
    }

    pub fn prompt_tokens(&self, qa: &QAItem) -> Vec<TokenId> {
        self.vocab.encode(&render_prompt(qa))
    }

    /// Samples one rollout for `qa` with the given seed.
    pub fn run(&self, theta: &PolicyParams, qa: &QAItem, seed: u64) -> Trajectory {
        let builder = TrajectoryBuilder::new(self.prompt_tokens(qa), qa.image_feature.iter().cloned().collect());
        self.resume(theta, qa, builder.finish(), seed)
    }

    /// Continues generation after the last segment of `partial`.
    pub fn resume(&self, theta: &PolicyParams, qa: &QAItem, partial: Trajectory, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scorer = Scorer::new(theta, &partial.images);
        let mut stream = partial.prompt_tokens.clone();
        stream.extend_from_slice(&partial.tokens);
        let queries = partial.segments_of(SegmentKind::Query).count();
        let policy_tokens = partial.loss_mask().iter().filter(|m| !**m).count();
        let answers = partial.segments_of(SegmentKind::Answer).count();
        let grammar = Grammar::resume(partial.segments.last().map(|s| s.kind), answers);
        let mut st = GenState {
            builder: TrajectoryBuilder::from_trajectory(partial),
            grammar,
            queries,
            policy_tokens,
            stream,
        };
        let options: Vec<TokenId> = qa.options.keys().map(|&l| letter_id(l)).collect();
        let mut open: Option<(SegmentKind, Vec<TokenId>)> = None;

        loop {
            if st.policy_tokens >= self.cfg.max_tokens {
                self.force_finish(&mut st, open.take(), &scorer, &options, &mut rng);
                break;
            }
            let tok = sample_token(&scorer.next(&st.stream), None, self.cfg.sampling, &mut rng);
            match (open.as_mut(), classify(tok)) {
                (None, TokenClass::Tag { kind, open: true }) => {
                    if kind == SegmentKind::Query && st.queries >= self.cfg.max_turns {
                        // query budget spent: the attempt is dropped and an answer forced
                        self.force_answer(&mut st, Vec::new(), &scorer, &options, &mut rng);
                        break;
                    }
                    if let Err(e) = st.grammar.open(kind) {
                        self.violate(&mut st, e, Vec::new(), tok);
                        break;
                    }
                    st.stream.push(tok);
                    st.policy_tokens += 1;
                    open = Some((kind, Vec::new()));
                }
                (None, TokenClass::Tag { kind, open: false }) => {
                    let e = st.grammar.close(kind).expect_err("nothing is open");
                    self.violate(&mut st, e, Vec::new(), tok);
                    break;
                }
                (None, _) => {
                    let e = FormatError::TextOutsideTags {
                        text: self.vocab.token_str(tok).to_string(),
                    };
                    self.violate(&mut st, e, Vec::new(), tok);
                    break;
                }
                (Some((k, _)), TokenClass::Tag { kind, open: false }) if kind == *k => {
                    let (k, content) = open.take().unwrap();
                    st.stream.push(tok);
                    st.policy_tokens += 1;
                    self.close(&mut st, k, content);
                    if k == SegmentKind::Answer {
                        break;
                    }
                }
                (Some((k, _)), TokenClass::Tag { kind, open: is_open }) => {
                    let e = if is_open {
                        FormatError::UnclosedTag { kind: *k }
                    } else {
                        FormatError::InterleavedTags {
                            expected: Some(*k),
                            found: kind,
                        }
                    };
                    let (k, content) = open.take().unwrap();
                    let mut partial = vec![tag_id(k, true)];
                    partial.extend(content);
                    self.violate(&mut st, e, partial, tok);
                    break;
                }
                (Some((_, content)), _) => {
                    content.push(tok);
                    st.stream.push(tok);
                    st.policy_tokens += 1;
                }
            }
        }
        st.builder.finish()
    }

    fn close(&self, st: &mut GenState, kind: SegmentKind, content: Vec<TokenId>) {
        st.grammar.close(kind).expect("closing the open segment");
        let text = self.vocab.decode_text(&content);
        st.builder.push_segment(kind, text, &content);
        if kind == SegmentKind::Query {
            st.queries += 1;
            let query = st.builder.trajectory().segments.last().unwrap().text.clone();
            self.inject(st, SegmentKind::Retrieve, self.kb.payload(&query, self.cfg.top_k));
        }
    }

    fn inject(&self, st: &mut GenState, kind: SegmentKind, text: String) {
        if kind == SegmentKind::Retrieve {
            st.grammar.open(kind).expect("retrieve follows its query");
            st.grammar.close(kind).unwrap();
        }
        let content = self.vocab.encode_text(&text);
        st.stream.push(tag_id(kind, true));
        st.stream.extend_from_slice(&content);
        st.stream.push(tag_id(kind, false));
        st.builder.push_segment(kind, text, &content);
    }

    fn violate(&self, st: &mut GenState, error: FormatError, mut tokens: Vec<TokenId>, tok: TokenId) {
        tokens.push(tok);
        let text = self.vocab.decode(&tokens);
        st.builder.push_violation(error, &tokens, text);
    }

    fn force_finish(
        &self,
        st: &mut GenState,
        open: Option<(SegmentKind, Vec<TokenId>)>,
        scorer: &Scorer,
        options: &[TokenId],
        rng: &mut ChaCha8Rng,
    ) {
        match open {
            Some((SegmentKind::Answer, mut content)) => {
                if content.is_empty() {
                    let l = sample_token(&scorer.next(&st.stream), Some(options), self.cfg.sampling, rng);
                    content.push(l);
                    st.stream.push(l);
                }
                st.stream.push(tag_id(SegmentKind::Answer, false));
                self.close(st, SegmentKind::Answer, content);
            }
            Some((kind, content)) => {
                st.stream.push(tag_id(kind, false));
                self.close(st, kind, content);
                self.force_answer(st, Vec::new(), scorer, options, rng);
            }
            None => self.force_answer(st, Vec::new(), scorer, options, rng),
        }
    }

    fn force_answer(
        &self,
        st: &mut GenState,
        mut content: Vec<TokenId>,
        scorer: &Scorer,
        options: &[TokenId],
        rng: &mut ChaCha8Rng,
    ) {
        if st.grammar.open(SegmentKind::Answer).is_err() {
            return;
        }
        st.stream.push(tag_id(SegmentKind::Answer, true));
        let l = sample_token(&scorer.next(&st.stream), Some(options), self.cfg.sampling, rng);
        content.push(l);
        st.stream.push(l);
        st.stream.push(tag_id(SegmentKind::Answer, false));
        self.close(st, SegmentKind::Answer, content);
    }
}

pub fn run_rollout(theta: &PolicyParams, qa: &QAItem, kb: &KnowledgeBase, vocab: &Vocab, cfg: RolloutConfig) -> Trajectory {
    RolloutEngine::new(vocab, kb, cfg).run(theta, qa, cfg.seed)
}

// ---------------------------------------------------------------------------
// Confidence
// ---------------------------------------------------------------------------

/// Probability of `token` at stream position `pos` given everything before it.
fn slot_prob(theta: &PolicyParams, prompt: &[TokenId], images: &[Vec<f64>], tokens: &[TokenId], pos: usize, token: TokenId) -> f64 {
    let mut ctx = prompt.to_vec();
    ctx.extend_from_slice(&tokens[..pos]);
    Scorer::new(theta, images).next(&ctx).logprob(token).exp()
}

fn answer_slot(traj: &Trajectory) -> Result<usize, InferenceError> {
    match traj.answer_position {
        Some(p) if p < traj.tokens.len() => Ok(p),
        _ => Err(InferenceError::NoAnswer),
    }
}

/// η: probability of the generated answer token under the full context.
pub fn answer_confidence(theta: &PolicyParams, traj: &Trajectory) -> Result<f64, InferenceError> {
    let pos = answer_slot(traj)?;
    Ok(slot_prob(theta, &traj.prompt_tokens, &traj.images, &traj.tokens, pos, traj.tokens[pos]))
}

/// Probability of the ground-truth letter at the answer slot, retrieved content included.
pub fn gold_confidence(theta: &PolicyParams, traj: &Trajectory, gold: Letter) -> Result<f64, InferenceError> {
    let pos = answer_slot(traj)?;
    Ok(slot_prob(theta, &traj.prompt_tokens, &traj.images, &traj.tokens, pos, letter_id(gold)))
}

/// Probability of the ground-truth letter at the answer slot after deleting
/// every retrieve segment (and any re-retrieved image) from the context.
pub fn counterfactual_confidence(theta: &PolicyParams, traj: &Trajectory, gold: Letter) -> Result<f64, InferenceError> {
    answer_slot(traj)?;
    let (tokens, pos) = traj.without_retrieval();
    let pos = pos.ok_or(InferenceError::NoAnswer)?;
    let input_image = &traj.images[..traj.images.len().min(1)];
    Ok(slot_prob(theta, &traj.prompt_tokens, input_image, &tokens, pos, letter_id(gold)))
}

// ---------------------------------------------------------------------------
// CDIR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub eta: f64,
    pub lambda: f64,
    pub triggered: bool,
}

impl ConfidenceReport {
    pub fn new(eta: f64, lambda: f64) -> Self {
        ConfidenceReport {
            eta,
            lambda,
            triggered: eta < lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdirConfig {
    pub lambda: f64,
    pub subsample_n: usize,
    pub seed: u64,
}

impl Default for CdirConfig {
    fn default() -> Self {
        CdirConfig {
            lambda: DEFAULT_LAMBDA,
            subsample_n: DEFAULT_IMAGE_SUBSAMPLE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdirResult {
    pub original: Trajectory,
    /// `None` when the item has no image (CDIR skipped).
    pub confidence: Option<ConfidenceReport>,
    pub retrieved: Option<MMEntry>,
    pub final_trajectory: Trajectory,
    pub final_answer: Option<Letter>,
}

impl CdirResult {
    pub fn triggered(&self) -> bool {
        self.confidence.map(|c| c.triggered).unwrap_or(false)
    }
}

/// Re-answers with the most similar image/caption pair when η < λ.
///
/// The retrieved caption is appended as a masked retrieve segment after the
/// existing history, the retrieved feature joins the conditioning images,
/// and generation resumes from there. Items without an image are returned
/// unchanged, as are triggered items when the corpus is empty.
pub fn cdir(
    theta: &PolicyParams,
    qa: &QAItem,
    traj: &Trajectory,
    mm_corpus: &[MMEntry],
    engine: &RolloutEngine<'_>,
    cfg: CdirConfig,
) -> CdirResult {
    let unchanged = |confidence| CdirResult {
        original: traj.clone(),
        confidence,
        retrieved: None,
        final_trajectory: traj.clone(),
        final_answer: traj.predicted_letter(),
    };
    let Some(image) = qa.image_feature.as_deref() else {
        return unchanged(None);
    };
    // an unanswered rollout has no confidence to speak of
    let eta = answer_confidence(theta, traj).unwrap_or(0.0);
    let report = ConfidenceReport::new(eta, cfg.lambda);
    if !report.triggered {
        return unchanged(Some(report));
    }
    let hit = match search_image(mm_corpus, image, cfg.subsample_n, cfg.seed) {
        Ok(hit) => hit,
        Err(e @ RetrievalError::EmptyCorpus) | Err(e @ RetrievalError::DimMismatch { .. }) => {
            log::warn!("image re-retrieval for `{}` skipped: {e}", qa.id);
            return unchanged(Some(report));
        }
        Err(e) => unreachable!("image search cannot fail with {e}"),
    };
    let entry = mm_corpus[hit.index].clone();
    let mut partial = traj.truncate_before_answer();
    partial.images.push(entry.image_feature.clone());
    let mut builder = TrajectoryBuilder::from_trajectory(partial);
    let content = engine.vocab.encode_text(&entry.caption);
    builder.push_segment(SegmentKind::Retrieve, entry.caption.clone(), &content);
    let final_trajectory = engine.resume(theta, qa, builder.finish(), cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    CdirResult {
        original: traj.clone(),
        confidence: Some(report),
        retrieved: Some(entry),
        final_answer: final_trajectory.predicted_letter(),
        final_trajectory,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::KBDoc;
    use crate::protocol::format_flags;
    use crate::retrieval::{chunk_corpus, Bm25Params};
    use std::collections::BTreeMap;

    fn qa(image: Option<Vec<f64>>) -> QAItem {
        let mut options = BTreeMap::new();
        for (l, t) in [('A', "red"), ('B', "blue"), ('C', "green"), ('D', "pink")] {
            options.insert(Letter::from_char(l).unwrap(), t.to_string());
        }
        QAItem {
            id: "q1".into(),
            question: "which option matches zeta case".into(),
            options,
            gold: Letter::from_char('C').unwrap(),
            image_feature: image,
            explanation: None,
            difficulty: None,
        }
    }

    fn setup() -> (Vocab, KnowledgeBase) {
        let docs = vec![
            KBDoc { id: "d1".into(), text: "zeta indicates C".into() },
            KBDoc { id: "d2".into(), text: "omega indicates A".into() },
        ];
        let q = qa(None);
        let mut texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let prompt = render_prompt(&q);
        texts.push(&prompt);
        let vocab = Vocab::from_texts(texts);
        let kb = KnowledgeBase::lexical(chunk_corpus(&docs, 100), Bm25Params::default());
        (vocab, kb)
    }

    /// A policy that deterministically follows a script of tokens, keyed on
    /// the last context token.
    fn scripted(vocab: &Vocab, transitions: &[(TokenId, TokenId)], default: TokenId) -> PolicyParams {
        // window 1, one-hot embeddings: logits[next] = big when last == key
        let v = vocab.len();
        let mut theta = PolicyParams::zeros(v, v, 0, 1);
        for t in 0..v {
            theta.embedding[t * v + t] = 1.0;
        }
        for t in 0..v {
            theta.output[t * v + default as usize] = 50.0;
        }
        for &(from, to) in transitions {
            theta.output[from as usize * v + default as usize] = 0.0;
            theta.output[from as usize * v + to as usize] = 100.0;
        }
        theta
    }

    fn id(vocab: &Vocab, s: &str) -> TokenId {
        vocab.encode(s)[0]
    }

    #[test]
    fn think_then_answer_without_retrieval() {
        let (vocab, kb) = setup();
        let think = tag_id(SegmentKind::Think, true);
        let theta = scripted(
            &vocab,
            &[
                (think, tag_id(SegmentKind::Think, false)),
                (tag_id(SegmentKind::Think, false), tag_id(SegmentKind::Answer, true)),
                (tag_id(SegmentKind::Answer, true), id(&vocab, "B")),
                (id(&vocab, "B"), tag_id(SegmentKind::Answer, false)),
            ],
            think,
        );
        let cfg = RolloutConfig { sampling: Sampling::Greedy, ..Default::default() };
        let t = run_rollout(&theta, &qa(None), &kb, &vocab, cfg);
        assert_eq!(t.segments.len(), 2);
        assert!(format_flags(&t).well_formed);
        assert!(!t.has_retrieval());
        assert_eq!(t.predicted_letter(), Letter::from_char('B'));
    }

    fn querying_policy(vocab: &Vocab) -> PolicyParams {
        let q_open = tag_id(SegmentKind::Query, true);
        let zeta = id(vocab, "zeta");
        scripted(
            vocab,
            &[
                (tag_id(SegmentKind::Think, true), tag_id(SegmentKind::Think, false)),
                (tag_id(SegmentKind::Think, false), q_open),
                (q_open, zeta),
                (zeta, tag_id(SegmentKind::Query, false)),
                (tag_id(SegmentKind::Retrieve, false), q_open),
                (tag_id(SegmentKind::Answer, true), id(vocab, "C")),
                (id(vocab, "C"), tag_id(SegmentKind::Answer, false)),
            ],
            tag_id(SegmentKind::Think, true),
        )
    }

    #[test]
    fn query_injects_masked_retrieve() {
        let (vocab, kb) = setup();
        let theta = querying_policy(&vocab);
        let cfg = RolloutConfig { sampling: Sampling::Greedy, max_turns: 2, ..Default::default() };
        let t = run_rollout(&theta, &qa(None), &kb, &vocab, cfg);
        let r = t.segments_of(SegmentKind::Retrieve).next().unwrap();
        assert_eq!(r.text, "zeta indicates C");
        assert!(r.loss_masked);
        assert!(format_flags(&t).well_formed);
        assert_eq!(t.segments_of(SegmentKind::Query).count(), 2);
    }

    #[test]
    fn query_budget_forces_answer() {
        let (vocab, kb) = setup();
        let theta = querying_policy(&vocab);
        let cfg = RolloutConfig { sampling: Sampling::Greedy, max_turns: 1, ..Default::default() };
        let t = run_rollout(&theta, &qa(None), &kb, &vocab, cfg);
        assert_eq!(t.segments_of(SegmentKind::Query).count(), 1);
        assert_eq!(t.segments.last().unwrap().kind, SegmentKind::Answer);
        assert!(format_flags(&t).well_formed);
        assert!(t.predicted_letter().is_some());
    }

    #[test]
    fn token_budget_forces_closed_answer() {
        let (vocab, kb) = setup();
        // thinks forever
        let think = tag_id(SegmentKind::Think, true);
        let omega = id(&vocab, "omega");
        let theta = scripted(&vocab, &[(think, omega), (omega, omega)], think);
        let cfg = RolloutConfig { sampling: Sampling::Greedy, max_tokens: 6, ..Default::default() };
        let t = run_rollout(&theta, &qa(None), &kb, &vocab, cfg);
        assert!(format_flags(&t).well_formed, "{t:?}");
        assert_eq!(t.segments[0].kind, SegmentKind::Think);
        assert_eq!(t.segments.last().unwrap().kind, SegmentKind::Answer);
    }

    #[test]
    fn stray_text_is_a_violation() {
        let (vocab, kb) = setup();
        // always emits a plain word
        let theta = scripted(&vocab, &[], id(&vocab, "omega"));
        let cfg = RolloutConfig { sampling: Sampling::Greedy, ..Default::default() };
        let t = run_rollout(&theta, &qa(None), &kb, &vocab, cfg);
        assert!(matches!(t.violation.as_ref().unwrap().error, FormatError::TextOutsideTags { .. }));
        assert!(!format_flags(&t).well_formed);
        assert!(t.predicted_letter().is_none());
        assert_eq!(t.tokens.len(), 1);
    }

    #[test]
    fn confidence_of_certain_and_uniform_policies() {
        let (vocab, kb) = setup();
        let theta = querying_policy(&vocab);
        let cfg = RolloutConfig { sampling: Sampling::Greedy, max_turns: 1, ..Default::default() };
        let t = run_rollout(&theta, &qa(None), &kb, &vocab, cfg);
        let eta = answer_confidence(&theta, &t).unwrap();
        assert!((eta - 1.0).abs() < 1e-9);

        let zero = PolicyParams::zeros(vocab.len(), 4, 0, 8);
        let eta = answer_confidence(&zero, &t).unwrap();
        assert!((eta - 1.0 / vocab.len() as f64).abs() < 1e-12);
        assert_eq!(answer_confidence(&zero, &Trajectory::default()), Err(InferenceError::NoAnswer));
    }

    #[test]
    fn counterfactual_equals_gold_without_retrieval() {
        let (vocab, kb) = setup();
        let theta = PolicyParams::random(vocab.len(), 6, 0, 8, 1.0, 3);
        let cfg = RolloutConfig { max_tokens: 10, max_turns: 0, ..Default::default() };
        let gold = Letter::from_char('C').unwrap();
        for seed in 0..20 {
            let t = RolloutEngine::new(&vocab, &kb, cfg).run(&theta, &qa(None), seed);
            if t.has_retrieval() || t.answer_position.is_none() {
                continue;
            }
            assert_eq!(
                gold_confidence(&theta, &t, gold).unwrap(),
                counterfactual_confidence(&theta, &t, gold).unwrap()
            );
        }
    }

    #[test]
    fn trigger_boundary() {
        assert!(!ConfidenceReport::new(0.80, 0.80).triggered);
        assert!(ConfidenceReport::new(0.79, 0.80).triggered);
    }

    #[test]
    fn cdir_appends_best_caption() {
        let (vocab, kb) = setup();
        let theta = PolicyParams::zeros(vocab.len(), 4, 2, 8); // η = 1/V < λ
        let item = qa(Some(vec![0.0, 1.0]));
        let engine = RolloutEngine::new(&vocab, &kb, RolloutConfig { max_tokens: 6, ..Default::default() });
        let traj = engine.run(&theta, &item, 1);
        let mm = vec![
            MMEntry { id: "m1".into(), image_feature: vec![1.0, 0.0], caption: "omega case".into() },
            MMEntry { id: "m2".into(), image_feature: vec![0.6, 0.8], caption: "zeta case".into() },
        ];
        let r = cdir(&theta, &item, &traj, &mm, &engine, CdirConfig::default());
        assert!(r.triggered());
        assert_eq!(r.retrieved.as_ref().unwrap().id, "m2");
        assert!(r
            .final_trajectory
            .segments_of(SegmentKind::Retrieve)
            .any(|s| s.text == "zeta case"));
        assert_eq!(r.final_trajectory.images.len(), 2);

        // no image: skipped
        let plain = engine.run(&theta, &qa(None), 1);
        let r = cdir(&theta, &qa(None), &plain, &mm, &engine, CdirConfig::default());
        assert!(!r.triggered());
        assert_eq!(r.final_trajectory, plain);

        // empty corpus: falls back to the original
        let r = cdir(&theta, &item, &traj, &[], &engine, CdirConfig::default());
        assert!(r.triggered());
        assert_eq!(r.final_trajectory, traj);
    }
}
