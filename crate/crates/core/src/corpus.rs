//! Data model and ingestion for QA items, knowledge-base documents and the
//! multimodal image/caption corpus, plus the deterministic reference text
//! embedder and gazetteer entity extractor.
//!
//! All three corpora are line-delimited UTF-8 JSON. Image features arrive
//! precomputed as number arrays; they are re-normalized to unit length when
//! within `1e-3` of unit norm and rejected otherwise.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

/// Tolerance for accepting a stored feature as "unit norm" before re-normalizing.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("record `{id}`: image feature norm {norm} is not within {NORM_TOLERANCE} of 1")]
    Norm { id: String, norm: f64 },
}

/// A multiple-choice option letter, `A` through `J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter(u8);

impl Letter {
    pub const COUNT: usize = 10;

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(Letter(index as u8))
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'A'..='J' => Some(Letter(c as u8 - b'A')),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    pub fn all() -> impl Iterator<Item = Letter> {
        (0..Self::COUNT as u8).map(Letter)
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl Serialize for Letter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_char().to_string())
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_letter(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid option letter `{s}`")))
    }
}

fn parse_letter(s: &str) -> Option<Letter> {
    let mut chars = s.trim().chars();
    let c = chars.next()?;
    if chars.next().is_some() {
        return None;
    }
    Letter::from_char(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Difficult,
}

/// A multiple-choice question with an optional image feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<Letter, String>,
    pub gold: Letter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
}

impl QAItem {
    pub fn gold_text(&self) -> &str {
        self.options.get(&self.gold).map(String::as_str).unwrap_or("")
    }

    /// Copy of the item with the image removed (text-only training stage).
    pub fn text_only(&self) -> QAItem {
        QAItem {
            image_feature: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KBDoc {
    pub id: String,
    pub text: String,
}

/// An image feature paired with its clinical caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MMEntry {
    pub id: String,
    pub image_feature: Vec<f64>,
    pub caption: String,
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

fn schema(line: usize, field: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// A parsed JSON object with its 1-based line number.
type Record = (usize, Map<String, Value>);

fn read_records(path: &Path) -> Result<Vec<Record>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => out.push((lineno, map)),
            Ok(_) => return Err(schema(lineno, "<record>", "expected a JSON object")),
            Err(e) => return Err(schema(lineno, "<record>", e.to_string())),
        }
    }
    Ok(out)
}

fn req_str(rec: &Map<String, Value>, line: usize, field: &str) -> Result<String, CorpusError> {
    match rec.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(line, field, "expected a string")),
        None => Err(schema(line, field, "missing")),
    }
}

fn opt_str(rec: &Map<String, Value>, line: usize, field: &str) -> Result<Option<String>, CorpusError> {
    match rec.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(schema(line, field, "expected a string")),
    }
}

fn feature(
    rec: &Map<String, Value>,
    line: usize,
    field: &str,
    id: &str,
) -> Result<Option<Vec<f64>>, CorpusError> {
    let arr = match rec.get(field) {
        None | Some(Value::Null) => return Ok(None),
        Some(Value::Array(a)) => a,
        Some(_) => return Err(schema(line, field, "expected a number array")),
    };
    let v = arr
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| schema(line, field, "non-numeric entry")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.is_empty() {
        return Err(schema(line, field, "empty feature"));
    }
    renormalize(v, id).map(Some)
}

/// Re-normalizes a feature that is already close to unit norm.
pub fn renormalize(mut v: Vec<f64>, id: &str) -> Result<Vec<f64>, CorpusError> {
    let norm = l2_norm(&v);
    if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(CorpusError::Norm {
            id: id.to_string(),
            norm,
        });
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn check_dims<'a>(
    features: impl Iterator<Item = (usize, &'a Vec<f64>)>,
    field: &str,
) -> Result<(), CorpusError> {
    let mut dim = None;
    for (line, f) in features {
        match dim {
            None => dim = Some(f.len()),
            Some(d) if d != f.len() => {
                return Err(schema(
                    line,
                    field,
                    format!("dimension {} differs from earlier records ({d})", f.len()),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QAItem>, CorpusError> {
    let mut items = Vec::new();
    let mut lines = Vec::new();
    for (line, rec) in read_records(path.as_ref())? {
        let id = req_str(&rec, line, "id")?;
        let question = req_str(&rec, line, "question")?;
        let options = match rec.get("options") {
            Some(Value::Object(m)) => m,
            Some(_) => return Err(schema(line, "options", "expected an object")),
            None => return Err(schema(line, "options", "missing")),
        };
        let mut opts = BTreeMap::new();
        for (k, v) in options {
            let letter =
                parse_letter(k).ok_or_else(|| schema(line, "options", format!("invalid letter `{k}`")))?;
            let text = v
                .as_str()
                .ok_or_else(|| schema(line, "options", format!("option `{k}` is not a string")))?;
            opts.insert(letter, text.to_string());
        }
        if !(2..=Letter::COUNT).contains(&opts.len()) {
            return Err(schema(line, "options", format!("{} options; expected 2 to 10", opts.len())));
        }
        let gold_raw = req_str(&rec, line, "gold")?;
        let gold = parse_letter(&gold_raw)
            .filter(|g| opts.contains_key(g))
            .ok_or_else(|| schema(line, "gold", format!("`{gold_raw}` is not one of the options")))?;
        let image_feature = feature(&rec, line, "image_feature", &id)?;
        let explanation = opt_str(&rec, line, "explanation")?;
        let difficulty = match opt_str(&rec, line, "difficulty")?.as_deref() {
            None => None,
            Some("easy") | Some("Easy") => Some(Difficulty::Easy),
            Some("difficult") | Some("Difficult") => Some(Difficulty::Difficult),
            Some(other) => return Err(schema(line, "difficulty", format!("unknown value `{other}`"))),
        };
        lines.push(line);
        items.push(QAItem {
            id,
            question,
            options: opts,
            gold,
            image_feature,
            explanation,
            difficulty,
        });
    }
    check_dims(
        lines
            .iter()
            .zip(&items)
            .filter_map(|(l, q)| q.image_feature.as_ref().map(|f| (*l, f))),
        "image_feature",
    )?;
    Ok(items)
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<Vec<KBDoc>, CorpusError> {
    read_records(path.as_ref())?
        .into_iter()
        .map(|(line, rec)| {
            let id = req_str(&rec, line, "id")?;
            let text = req_str(&rec, line, "text")?;
            if text.trim().is_empty() {
                return Err(schema(line, "text", "empty document"));
            }
            Ok(KBDoc { id, text })
        })
        .collect()
}

pub fn load_mm(path: impl AsRef<Path>) -> Result<Vec<MMEntry>, CorpusError> {
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for (line, rec) in read_records(path.as_ref())? {
        let id = req_str(&rec, line, "id")?;
        let caption = req_str(&rec, line, "caption")?;
        let image_feature =
            feature(&rec, line, "image_feature", &id)?.ok_or_else(|| schema(line, "image_feature", "missing"))?;
        lines.push(line);
        out.push(MMEntry {
            id,
            image_feature,
            caption,
        });
    }
    check_dims(lines.iter().copied().zip(out.iter().map(|e| &e.image_feature)), "image_feature")?;
    Ok(out)
}

/// Writes records as line-delimited JSON.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> std::io::Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        buf.push('\n');
    }
    fs::write(path, buf)
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalizes in place; returns false (leaving `v` untouched) for a zero vector.
pub fn normalize(v: &mut [f64]) -> bool {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

// ---------------------------------------------------------------------------
// Text embedding
// ---------------------------------------------------------------------------

/// Maps text to a unit vector in a shared text/image space.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Character 3-gram feature-hashing embedder.
///
/// The input is lowercased, whitespace-collapsed and padded with a single
/// space on each side; every character trigram is hashed with a seeded
/// xxh64 into one of `dim` buckets with a ±1 sign taken from the top hash
/// bit. The result is L2-normalized. Empty input (and the measure-zero case
/// where all buckets cancel) maps to the first basis vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl ReferenceEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedder dimension must be positive");
        ReferenceEmbedder { dim, seed }
    }

    fn basis(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[0] = 1.0;
        v
    }
}

impl TextEmbedder for ReferenceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if normalized.is_empty() {
            return self.basis();
        }
        let padded: Vec<char> = std::iter::once(' ')
            .chain(normalized.chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = String::with_capacity(12);
        for gram in padded.windows(3) {
            buf.clear();
            buf.extend(gram);
            let h = xxh64(buf.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        if normalize(&mut v) {
            v
        } else {
            self.basis()
        }
    }
}

// ---------------------------------------------------------------------------
// Entity extraction
// ---------------------------------------------------------------------------

pub trait EntityExtractor: Send + Sync {
    fn extract(&self, text: &str) -> BTreeSet<String>;
}

/// Lowercase alphanumeric word runs.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A fixed phrase list matched longest-first on word boundaries.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    phrases: BTreeSet<String>,
    keys: HashSet<String>,
    max_words: usize,
}

impl Gazetteer {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Gazetteer::default();
        for p in phrases {
            g.insert(p.as_ref());
        }
        g
    }

    /// One phrase per line; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Gazetteer::new(text.lines()))
    }

    fn insert(&mut self, phrase: &str) {
        let ws = words(phrase);
        if ws.is_empty() {
            return;
        }
        self.max_words = self.max_words.max(ws.len());
        let key = ws.join(" ");
        self.keys.insert(key.clone());
        self.phrases.insert(key);
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.phrases.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

impl EntityExtractor for Gazetteer {
    fn extract(&self, text: &str) -> BTreeSet<String> {
        extract_entities(text, self)
    }
}

/// Case-insensitive, longest-match-first, non-overlapping phrase matching.
pub fn extract_entities(text: &str, gazetteer: &Gazetteer) -> BTreeSet<String> {
    let ws = words(text);
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < ws.len() {
        let longest = gazetteer.max_words.min(ws.len() - i);
        let hit = (1..=longest).rev().find_map(|n| {
            let candidate = ws[i..i + n].join(" ");
            gazetteer.keys.contains(&candidate).then_some((n, candidate))
        });
        match hit {
            Some((n, phrase)) => {
                found.insert(phrase);
                i += n;
            }
            None => i += 1,
        }
    }
    found
}

/// Which text supplies the ground-truth entity set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntitySource {
    #[default]
    ExplanationAndGold,
    Explanation,
    Gold,
}

impl std::str::FromStr for EntitySource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "explanation_and_gold" => Ok(Self::ExplanationAndGold),
            "explanation" => Ok(Self::Explanation),
            "gold" => Ok(Self::Gold),
            _ => Err(format!("unknown entity source `{s}`")),
        }
    }
}

/// Ground-truth entity set for a question.
pub fn ground_truth_entities(
    qa: &QAItem,
    source: EntitySource,
    extractor: &dyn EntityExtractor,
) -> BTreeSet<String> {
    let explanation = qa.explanation.as_deref().unwrap_or("");
    let text = match source {
        EntitySource::ExplanationAndGold => format!("{explanation}\n{}", qa.gold_text()),
        EntitySource::Explanation => explanation.to_string(),
        EntitySource::Gold => qa.gold_text().to_string(),
    };
    extractor.extract(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_minimal_qa_without_image() {
        let f = write_tmp(&[r#"{"id":"q1","question":"which?","options":{"A":"x","B":"y"},"gold":"A"}"#]);
        let items = load_qa(f.path()).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].gold, Letter::from_char('A').unwrap());
        assert!(items[0].image_feature.is_none());
    }

    #[test]
    fn gold_outside_options_is_schema_error() {
        let f = write_tmp(&[
            r#"{"id":"q0","question":"ok","options":{"A":"x","B":"y"},"gold":"B"}"#,
            r#"{"id":"q1","question":"which?","options":{"A":"x","B":"y"},"gold":"C"}"#,
        ]);
        match load_qa(f.path()) {
            Err(CorpusError::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "gold");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let f = write_tmp(&[r#"{"id":"q1","options":{"A":"x","B":"y"},"gold":"A"}"#]);
        match load_qa(f.path()) {
            Err(CorpusError::Schema { field, .. }) => assert_eq!(field, "question"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn half_norm_feature_rejected() {
        let f = write_tmp(&[
            r#"{"id":"q1","question":"?","options":{"A":"x","B":"y"},"gold":"A","image_feature":[0.5,0.0]}"#,
        ]);
        assert!(matches!(load_qa(f.path()), Err(CorpusError::Norm { ref id, .. }) if id == "q1"));
    }

    #[test]
    fn near_unit_feature_renormalized() {
        let f = write_tmp(&[r#"{"id":"m1","image_feature":[0.6,0.8004],"caption":"c"}"#]);
        let mm = load_mm(f.path()).unwrap();
        assert!((l2_norm(&mm[0].image_feature) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let f = write_tmp(&[
            r#"{"id":"m1","image_feature":[1.0,0.0],"caption":"c"}"#,
            r#"{"id":"m2","image_feature":[1.0,0.0,0.0],"caption":"c"}"#,
        ]);
        assert!(matches!(load_mm(f.path()), Err(CorpusError::Schema { line: 2, .. })));
    }

    #[test]
    fn kb_rejects_empty_text() {
        let f = write_tmp(&[r#"{"id":"d1","text":"   "}"#]);
        assert!(matches!(load_kb(f.path()), Err(CorpusError::Schema { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_kb("/nonexistent/kb.jsonl"), Err(CorpusError::Io { .. })));
    }

    #[test]
    fn embedder_is_deterministic_and_unit() {
        let e = ReferenceEmbedder::new(32, 7);
        let a = e.embed("abc");
        assert_eq!(a, e.embed("abc"));
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        for s in ["x", "aortic stenosis", "Ω unicode ✓", "  spaced   out "] {
            assert!((l2_norm(&e.embed(s)) - 1.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn empty_string_embeds_to_first_basis_vector() {
        let e = ReferenceEmbedder::new(8, 1);
        let v = e.embed("");
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn seed_changes_embedding() {
        let a = ReferenceEmbedder::new(64, 1).embed("myocardial infarction");
        let b = ReferenceEmbedder::new(64, 2).embed("myocardial infarction");
        assert_ne!(a, b);
    }

    #[test]
    fn gazetteer_examples() {
        let g = Gazetteer::new(["myocardial infarction", "aspirin"]);
        let got = extract_entities("treatment for myocardial infarction includes aspirin", &g);
        assert_eq!(
            got,
            ["aspirin", "myocardial infarction"].iter().map(|s| s.to_string()).collect()
        );

        let g = Gazetteer::new(["heart", "heart failure"]);
        assert_eq!(
            extract_entities("heart failure", &g),
            std::iter::once("heart failure".to_string()).collect()
        );
        assert!(extract_entities("", &g).is_empty());
    }

    #[test]
    fn gazetteer_is_case_insensitive_and_word_bounded() {
        let g = Gazetteer::new(["  Aspirin  ", "art"]);
        let got = extract_entities("ASPIRIN given; heart rate normal", &g);
        assert_eq!(got, std::iter::once("aspirin".to_string()).collect());
    }

    #[test]
    fn gazetteer_collapses_duplicates() {
        let g = Gazetteer::new(["fever"]);
        assert_eq!(extract_entities("fever, fever and fever", &g).len(), 1);
    }

    #[test]
    fn ground_truth_sources() {
        let g = Gazetteer::new(["edema", "sepsis"]);
        let mut opts = BTreeMap::new();
        opts.insert(Letter::from_char('A').unwrap(), "sepsis".to_string());
        opts.insert(Letter::from_char('B').unwrap(), "other".to_string());
        let qa = QAItem {
            id: "q".into(),
            question: "?".into(),
            options: opts,
            gold: Letter::from_char('A').unwrap(),
            image_feature: None,
            explanation: Some("pulmonary edema".into()),
            difficulty: None,
        };
        assert_eq!(ground_truth_entities(&qa, EntitySource::ExplanationAndGold, &g).len(), 2);
        assert_eq!(
            ground_truth_entities(&qa, EntitySource::Explanation, &g),
            std::iter::once("edema".to_string()).collect()
        );
        assert_eq!(
            ground_truth_entities(&qa, EntitySource::Gold, &g),
            std::iter::once("sepsis".to_string()).collect()
        );
    }
}
