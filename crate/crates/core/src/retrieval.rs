//! Knowledge-base chunking, BM25 and dense top-k search, and image-feature
//! similarity search over the multimodal corpus.
//!
//! Every ranking is sorted by descending score with ties broken by
//! ascending id, so results are fully deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{dot, normalize, KBDoc, MMEntry, TextEmbedder};

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_MIN_CHUNK_WORDS: usize = 100;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("query has no indexable terms")]
    EmptyQuery,
    #[error("vector dimension {found} does not match index dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("zero vector for `{id}`")]
    ZeroVector { id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    pub word_count: usize,
}

impl Chunk {
    /// Stable id `doc_id#index`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.doc_id, self.chunk_index)
    }
}

/// Splits a document into consecutive blocks of exactly `min_words` words;
/// a shorter remainder is folded into the last block. A document shorter
/// than `min_words` becomes a single chunk.
pub fn chunk_document(doc: &KBDoc, min_words: usize) -> Vec<Chunk> {
    assert!(min_words >= 1, "min_words must be at least 1");
    let words: Vec<&str> = doc.text.split_whitespace().collect();
    if words.is_empty() {
        return Vec::new();
    }
    let n_chunks = (words.len() / min_words).max(1);
    (0..n_chunks)
        .map(|i| {
            let start = i * min_words;
            let end = if i + 1 == n_chunks { words.len() } else { start + min_words };
            Chunk {
                doc_id: doc.id.clone(),
                chunk_index: i,
                text: words[start..end].join(" "),
                word_count: end - start,
            }
        })
        .collect()
}

pub fn chunk_corpus(docs: &[KBDoc], min_words: usize) -> Vec<Chunk> {
    docs.iter().flat_map(|d| chunk_document(d, min_words)).collect()
}

/// Lowercase whitespace terms with surrounding punctuation stripped.
pub fn terms(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<(String, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|(id, _)| id.as_str())
    }
}

fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> RetrievalResult {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    RetrievalResult { hits: scored }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: BM25_K1, b: BM25_B }
    }
}

/// Inverted index with BM25 scoring. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexicalIndex {
    ids: Vec<String>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    params: Bm25Params,
}

impl LexicalIndex {
    pub fn build<'a>(docs: impl IntoIterator<Item = (String, &'a str)>, params: Bm25Params) -> Self {
        let mut ids = Vec::new();
        let mut doc_lengths = Vec::new();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (i, (id, text)) in docs.into_iter().enumerate() {
            let ts = terms(text);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &ts {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((i as u32, f));
            }
            ids.push(id);
            doc_lengths.push(ts.len() as u32);
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = if ids.is_empty() { 0.0 } else { total as f64 / ids.len() as f64 };
        LexicalIndex {
            ids,
            postings,
            doc_lengths,
            avg_doc_length,
            params,
        }
    }

    pub fn from_chunks(chunks: &[Chunk], params: Bm25Params) -> Self {
        Self::build(chunks.iter().map(|c| (c.id(), c.text.as_str())), params)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// BM25 top-k. Only chunks sharing at least one term with the query are
/// candidates; a query with no corpus term is an `EmptyQuery`.
pub fn search_lexical(index: &LexicalIndex, query: &str, k: usize) -> Result<RetrievalResult, RetrievalError> {
    assert!(k >= 1, "k must be at least 1");
    let qterms: Vec<String> = {
        let mut seen = HashSet::new();
        terms(query).into_iter().filter(|t| seen.insert(t.clone())).collect()
    };
    let Bm25Params { k1, b } = index.params;
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for t in &qterms {
        let Some(list) = index.postings.get(t) else {
            continue;
        };
        let idf = index.idf(list.len());
        for &(doc, tf) in list {
            let tf = tf as f64;
            let dl = index.doc_lengths[doc as usize] as f64;
            let norm = 1.0 - b + b * dl / index.avg_doc_length;
            *scores.entry(doc).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
        }
    }
    if scores.is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let scored = scores
        .into_iter()
        .map(|(doc, s)| (index.ids[doc as usize].clone(), s))
        .collect();
    Ok(top_k(scored, k))
}

/// Exhaustive cosine index over unit vectors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DenseIndex {
    dim: usize,
    entries: Vec<(String, Vec<f64>)>,
}

impl DenseIndex {
    pub fn new(dim: usize) -> Self {
        DenseIndex { dim, entries: Vec::new() }
    }

    /// Stores `v` normalized to unit length.
    pub fn insert(&mut self, id: impl Into<String>, mut v: Vec<f64>) -> Result<(), RetrievalError> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        if !normalize(&mut v) {
            return Err(RetrievalError::ZeroVector { id });
        }
        self.entries.push((id, v));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn search_dense(index: &DenseIndex, query: &[f64], k: usize) -> Result<RetrievalResult, RetrievalError> {
    assert!(k >= 1, "k must be at least 1");
    if query.len() != index.dim {
        return Err(RetrievalError::DimMismatch {
            expected: index.dim,
            found: query.len(),
        });
    }
    let scored = index.entries.iter().map(|(id, v)| (id.clone(), dot(v, query))).collect();
    Ok(top_k(scored, k))
}

/// Best match of an image search over a random subsample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    pub index: usize,
    pub score: f64,
    /// Corpus indices that were scored.
    pub sampled: Vec<usize>,
}

/// Cosine argmax over `min(subsample_n, |corpus|)` entries drawn without
/// replacement from a generator seeded with `seed`.
pub fn search_image(
    corpus: &[MMEntry],
    feature: &[f64],
    subsample_n: usize,
    seed: u64,
) -> Result<ImageMatch, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = subsample_n.min(corpus.len()).max(1);
    let mut sampled = if amount == corpus.len() {
        (0..corpus.len()).collect()
    } else {
        sample(&mut rng, corpus.len(), amount).into_vec()
    };
    sampled.sort_unstable();
    let mut best: Option<(usize, f64)> = None;
    for &i in &sampled {
        let f = &corpus[i].image_feature;
        if f.len() != feature.len() {
            return Err(RetrievalError::DimMismatch {
                expected: f.len(),
                found: feature.len(),
            });
        }
        let s = dot(f, feature);
        let better = match best {
            None => true,
            Some((j, bs)) => s > bs || (s == bs && corpus[i].id < corpus[j].id),
        };
        if better {
            best = Some((i, s));
        }
    }
    let (index, score) = best.expect("non-empty sample");
    Ok(ImageMatch { index, score, sampled })
}

// ---------------------------------------------------------------------------
// Knowledge base handle used by rollouts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    #[default]
    Lexical,
    Dense,
}

impl std::str::FromStr for RetrieverKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lexical" | "bm25" => Ok(Self::Lexical),
            "dense" => Ok(Self::Dense),
            _ => Err(format!("unknown retriever `{s}`")),
        }
    }
}

enum Backend {
    Lexical(LexicalIndex),
    Dense {
        index: DenseIndex,
        embedder: Arc<dyn TextEmbedder>,
    },
}

/// Chunked knowledge base with a search backend.
pub struct KnowledgeBase {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
    backend: Backend,
    /// Keep at most one chunk per source document.
    pub dedup_documents: bool,
}

impl KnowledgeBase {
    pub fn lexical(chunks: Vec<Chunk>, params: Bm25Params) -> Self {
        let index = LexicalIndex::from_chunks(&chunks, params);
        Self::with_backend(chunks, Backend::Lexical(index))
    }

    pub fn dense(chunks: Vec<Chunk>, embedder: Arc<dyn TextEmbedder>) -> Self {
        let mut index = DenseIndex::new(embedder.dim());
        for c in &chunks {
            index
                .insert(c.id(), embedder.embed(&c.text))
                .expect("embedder output has the index dimension and unit norm");
        }
        Self::with_backend(chunks, Backend::Dense { index, embedder })
    }

    pub fn from_lexical_index(chunks: Vec<Chunk>, index: LexicalIndex) -> Self {
        Self::with_backend(chunks, Backend::Lexical(index))
    }

    fn with_backend(chunks: Vec<Chunk>, backend: Backend) -> Self {
        let by_id = chunks.iter().enumerate().map(|(i, c)| (c.id(), i)).collect();
        KnowledgeBase {
            chunks,
            by_id,
            backend,
            dedup_documents: false,
        }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<(&Chunk, f64)>, RetrievalError> {
        // over-fetch so de-duplication can still fill k slots
        let fetch = if self.dedup_documents { self.chunks.len().max(k) } else { k };
        let result = match &self.backend {
            Backend::Lexical(index) => search_lexical(index, query, fetch)?,
            Backend::Dense { index, embedder } => {
                if terms(query).is_empty() {
                    return Err(RetrievalError::EmptyQuery);
                }
                search_dense(index, &embedder.embed(query), fetch)?
            }
        };
        let mut seen = HashSet::new();
        Ok(result
            .hits
            .iter()
            .map(|(id, s)| (&self.chunks[self.by_id[id]], *s))
            .filter(|(c, _)| !self.dedup_documents || seen.insert(c.doc_id.clone()))
            .take(k)
            .collect())
    }

    /// Text injected into a `<retrieve>` segment: top-k chunk texts in rank
    /// order separated by a blank line. An empty query yields "".
    pub fn payload(&self, query: &str, k: usize) -> String {
        match self.search(query, k) {
            Ok(hits) => hits
                .iter()
                .map(|(c, _)| sanitize(&c.text))
                .collect::<Vec<_>>()
                .join("\n\n"),
            Err(_) => String::new(),
        }
    }
}

/// Removes tag literals so retrieved text cannot alter the segment structure.
fn sanitize(text: &str) -> String {
    let mut out = text.to_string();
    for lit in crate::vocab::TAG_LITERALS {
        out = out.replace(lit, " ");
    }
    out
}
