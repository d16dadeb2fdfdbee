//! Seeded synthetic corpora where the gold letter is only recoverable from
//! the knowledge base.
//!
//! Every item has a unique made-up key word. Its question names the key, its
//! options are drawn from a shared pool of finding names, and the only text
//! linking key and gold letter is one KB document `"<key> indicates <L>"`.
//! The item's image feature is the embedding of its key, and the multimodal
//! corpus holds one noisy copy of every item image captioned like its KB
//! document.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, KBDoc, Letter, MMEntry, QAItem, ReferenceEmbedder, TextEmbedder};
use crate::vocab::{corpus_vocab, Vocab};

pub const FINDINGS: [&str; 12] = [
    "fever", "rash", "cough", "edema", "anemia", "fracture", "nodule", "effusion", "stenosis", "ulcer", "murmur", "cyst",
];

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub items: usize,
    pub options: usize,
    pub image_dim: usize,
    /// Standard deviation of the noise added to multimodal-corpus copies.
    pub mm_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            items: 50,
            options: 4,
            image_dim: 32,
            mm_noise: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub qa: Vec<QAItem>,
    pub kb: Vec<KBDoc>,
    pub mm: Vec<MMEntry>,
    /// Key words and finding names.
    pub gazetteer: Vec<String>,
    pub keys: Vec<String>,
}

impl SyntheticCorpus {
    /// Vocabulary over questions, options, explanations and KB texts.
    pub fn vocab(&self) -> Vocab {
        corpus_vocab(&self.qa, &self.kb)
    }
}

fn key_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    assert!((2..=Letter::COUNT).contains(&cfg.options), "2 to 10 options");
    assert!(cfg.options <= FINDINGS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let embedder = ReferenceEmbedder::new(cfg.image_dim, cfg.seed);
    let reserved: BTreeSet<&str> = FINDINGS.iter().copied().chain(["which", "finding", "matches", "indicates"]).collect();
    let mut keys = BTreeSet::new();
    let mut ordered = Vec::new();
    while ordered.len() < cfg.items {
        let k = key_word(&mut rng);
        if !reserved.contains(k.as_str()) && keys.insert(k.clone()) {
            ordered.push(k);
        }
    }

    let mut qa = Vec::with_capacity(cfg.items);
    let mut kb = Vec::with_capacity(cfg.items);
    let mut mm = Vec::with_capacity(cfg.items);
    for (i, key) in ordered.iter().enumerate() {
        let findings: Vec<&str> = FINDINGS.choose_multiple(&mut rng, cfg.options).copied().collect();
        let options: BTreeMap<Letter, String> = findings
            .iter()
            .enumerate()
            .map(|(j, f)| (Letter::from_index(j).unwrap(), f.to_string()))
            .collect();
        let gold = Letter::from_index(rng.gen_range(0..cfg.options)).unwrap();
        let image = embedder.embed(key);
        qa.push(QAItem {
            id: format!("syn{i:03}"),
            question: format!("which finding matches {key}"),
            gold,
            explanation: Some(format!("{key} indicates {}", options[&gold])),
            options,
            image_feature: Some(image.clone()),
            difficulty: None,
        });
        let text = format!("{key} indicates {gold}");
        kb.push(KBDoc {
            id: format!("kb{i:03}"),
            text: text.clone(),
        });
        let mut noisy: Vec<f64> = image.iter().map(|x| x + cfg.mm_noise * gaussian(&mut rng)).collect();
        if !normalize(&mut noisy) {
            noisy = image;
        }
        mm.push(MMEntry {
            id: format!("mm{i:03}"),
            image_feature: noisy,
            caption: text,
        });
    }
    let gazetteer = ordered.iter().cloned().chain(FINDINGS.iter().map(|s| s.to_string())).collect();
    SyntheticCorpus {
        qa,
        kb,
        mm,
        gazetteer,
        keys: ordered,
    }
}

/// Box–Muller standard normal draw.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
