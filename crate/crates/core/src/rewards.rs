//! Rollout rewards: format, accuracy, query semantics and confidence gain,
//! combined as a weighted sum.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{dot, ground_truth_entities, EntityExtractor, EntitySource, Letter, QAItem, TextEmbedder};
use crate::inference::{counterfactual_confidence, gold_confidence, RolloutConfig, RolloutEngine};
use crate::policy::PolicyParams;
use crate::protocol::{format_flags, FormatFlags, SegmentKind, Trajectory};

pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("embedding dimension {found} does not match image dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_f: f64,
    pub w_a: f64,
    pub w_q: f64,
    pub w_c: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_f: 1.0,
            w_a: 5.0,
            w_q: 0.4,
            w_c: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub sigma_f: u8,
    pub sigma_a: u8,
    pub sigma_q_text: f64,
    pub sigma_q_image: f64,
    pub sigma_c: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn sigma_q(&self) -> f64 {
        self.sigma_q_text + self.sigma_q_image
    }
}

/// 0 when malformed or without a think segment; otherwise 1, plus 1 when a
/// retrieval cycle led to a correct answer.
pub fn format_reward(flags: FormatFlags, correct: bool) -> u8 {
    if !flags.well_formed || !flags.has_think {
        return 0;
    }
    1 + u8::from(flags.retrieval_activated && correct)
}

pub fn accuracy_reward(predicted: Option<Letter>, gold: Letter) -> u8 {
    u8::from(predicted == Some(gold))
}

fn overlap(set: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    set.intersection(gold).count() as f64 / set.len() as f64
}

/// Share of query entities and of retrieved entities that are ground-truth
/// entities, summed. An empty query or knowledge set contributes 0.
pub fn query_text_reward(s_q: &BTreeSet<String>, s_k: &BTreeSet<String>, s_g: &BTreeSet<String>) -> f64 {
    overlap(s_q, s_g) + overlap(s_k, s_g)
}

/// Cosine similarity between the embedded query text and the image feature.
pub fn query_image_reward(query_text: &str, image_feature: &[f64], embedder: &dyn TextEmbedder) -> Result<f64, RewardError> {
    if embedder.dim() != image_feature.len() {
        return Err(RewardError::DimMismatch {
            expected: image_feature.len(),
            found: embedder.dim(),
        });
    }
    Ok(dot(&embedder.embed(query_text), image_feature))
}

/// Log-ratio of the ground-truth probability with and without retrieved
/// content, each clamped below at [`PROB_FLOOR`].
pub fn confidence_gain(p_with: f64, p_without: f64) -> f64 {
    (p_with.max(PROB_FLOOR) / p_without.max(PROB_FLOOR)).ln()
}

pub fn total_reward(b: &RewardBreakdown, w: &RewardWeights) -> f64 {
    w.w_f * b.sigma_f as f64 + w.w_a * b.sigma_a as f64 + w.w_q * b.sigma_q() + w.w_c * b.sigma_c
}

/// Which components are computed; the rest stay 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSet {
    pub format: bool,
    pub accuracy: bool,
    pub query: bool,
    pub confidence: bool,
}

impl RewardSet {
    pub const TEXT_STAGE: RewardSet = RewardSet {
        format: true,
        accuracy: true,
        query: false,
        confidence: false,
    };
    pub const ALL: RewardSet = RewardSet {
        format: true,
        accuracy: true,
        query: true,
        confidence: true,
    };
}

impl Default for RewardSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// Text compared against the image for the image-side query reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageQuerySource {
    /// The generated query text.
    #[default]
    Query,
    /// The question text of the prompt.
    Prompt,
}

impl FromStr for ImageQuerySource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "query" => Ok(Self::Query),
            "prompt" => Ok(Self::Prompt),
            _ => Err(format!("unknown image query source `{s}`")),
        }
    }
}

/// How the no-retrieval probability is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counterfactual {
    /// Delete every retrieve segment and rescore the answer slot.
    #[default]
    Delete,
    /// Sample a fresh rollout with querying disabled and score its answer slot.
    Resample,
}

impl FromStr for Counterfactual {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "delete" => Ok(Self::Delete),
            "resample" => Ok(Self::Resample),
            _ => Err(format!("unknown counterfactual mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub enabled: RewardSet,
    pub entity_source: EntitySource,
    pub image_query_source: ImageQuerySource,
    pub counterfactual: Counterfactual,
}

/// Scores finished rollouts; stateless apart from its borrowed resources.
pub struct RewardScorer<'a> {
    pub cfg: RewardConfig,
    pub extractor: &'a dyn EntityExtractor,
    pub embedder: &'a dyn TextEmbedder,
    pub engine: &'a RolloutEngine<'a>,
}

impl<'a> RewardScorer<'a> {
    pub fn new(
        cfg: RewardConfig,
        extractor: &'a dyn EntityExtractor,
        embedder: &'a dyn TextEmbedder,
        engine: &'a RolloutEngine<'a>,
    ) -> Self {
        RewardScorer {
            cfg,
            extractor,
            embedder,
            engine,
        }
    }

    fn entities_of(&self, traj: &Trajectory, kind: SegmentKind) -> BTreeSet<String> {
        traj.segments_of(kind).flat_map(|s| self.extractor.extract(&s.text)).collect()
    }

    /// `seed` only matters for the resampling counterfactual.
    pub fn score(&self, theta: &PolicyParams, qa: &QAItem, traj: &Trajectory, seed: u64) -> Result<RewardBreakdown, RewardError> {
        let on = self.cfg.enabled;
        let mut b = RewardBreakdown::default();
        let correct = accuracy_reward(traj.predicted_letter(), qa.gold);
        if on.accuracy {
            b.sigma_a = correct;
        }
        if on.format {
            b.sigma_f = format_reward(format_flags(traj), correct == 1);
        }
        if on.query {
            let s_g = ground_truth_entities(qa, self.cfg.entity_source, self.extractor);
            let s_q = self.entities_of(traj, SegmentKind::Query);
            let s_k = self.entities_of(traj, SegmentKind::Retrieve);
            b.sigma_q_text = query_text_reward(&s_q, &s_k, &s_g);
            if let Some(image) = &qa.image_feature {
                let text = match self.cfg.image_query_source {
                    ImageQuerySource::Query => traj.segments_of(SegmentKind::Query).next().map(|_| traj.query_text()),
                    ImageQuerySource::Prompt => Some(qa.question.clone()),
                };
                if let Some(text) = text {
                    b.sigma_q_image = query_image_reward(&text, image, self.embedder)?;
                }
            }
        }
        if on.confidence && traj.has_retrieval() {
            b.sigma_c = self.confidence(theta, qa, traj, seed);
        }
        b.total = total_reward(&b, &self.cfg.weights);
        Ok(b)
    }

    fn confidence(&self, theta: &PolicyParams, qa: &QAItem, traj: &Trajectory, seed: u64) -> f64 {
        let Ok(p_with) = gold_confidence(theta, traj, qa.gold) else {
            return 0.0;
        };
        let p_without = match self.cfg.counterfactual {
            Counterfactual::Delete => counterfactual_confidence(theta, traj, qa.gold).unwrap_or(0.0),
            Counterfactual::Resample => {
                let cfg = RolloutConfig {
                    max_turns: 0,
                    ..self.engine.cfg
                };
                let engine = RolloutEngine::new(self.engine.vocab, self.engine.kb, cfg);
                let fresh = engine.run(theta, qa, seed);
                gold_confidence(theta, &fresh, qa.gold).unwrap_or(0.0)
            }
        };
        confidence_gain(p_with, p_without)
    }
}
