//! Tagged rollout grammar and the trajectory data model.
//!
//! A rollout is a sequence of `<think>`, `<query>`, `<retrieve>` and
//! `<answer>` segments. Every query is immediately followed by the
//! environment's retrieve segment; a complete trajectory ends with exactly
//! one answer. Retrieved tokens are excluded from the policy loss.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Letter;
use crate::vocab::{self, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Think,
    Query,
    Retrieve,
    Answer,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [Self::Think, Self::Query, Self::Retrieve, Self::Answer];

    pub fn open_tag(self) -> &'static str {
        vocab::TAG_LITERALS[vocab::tag_id(self, true) as usize]
    }

    pub fn close_tag(self) -> &'static str {
        vocab::TAG_LITERALS[vocab::tag_id(self, false) as usize]
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Think => "think",
            Self::Query => "query",
            Self::Retrieve => "retrieve",
            Self::Answer => "answer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum FormatError {
    #[error("unclosed <{kind}> tag")]
    UnclosedTag { kind: SegmentKind },
    #[error("closing </{found}> does not match {}", expected.map(|k| format!("open <{k}>")).unwrap_or_else(|| "any open tag".into()))]
    InterleavedTags {
        expected: Option<SegmentKind>,
        found: SegmentKind,
    },
    #[error("query is not immediately followed by a retrieve segment")]
    QueryWithoutRetrieve,
    #[error("text outside tags: {text:?}")]
    TextOutsideTags { text: String },
    #[error("more than one answer segment")]
    MultipleAnswers,
}

/// One tagged span. `token_span` covers the open tag, the content and the
/// close tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub token_span: Range<usize>,
    pub loss_masked: bool,
}

/// Trailing policy output that broke the grammar during a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub error: FormatError,
    pub span: Range<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_tokens: Vec<TokenId>,
    /// Image features conditioning the whole trajectory (input image first).
    pub images: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
    /// Generated stream, including injected retrieve segments.
    pub tokens: Vec<TokenId>,
    /// Index into `tokens` of the token right after `<answer>`.
    pub answer_position: Option<usize>,
    pub violation: Option<Violation>,
}

impl Trajectory {
    pub fn segments_of(&self, kind: SegmentKind) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.kind == kind)
    }

    pub fn answer(&self) -> Option<&Segment> {
        self.segments_of(SegmentKind::Answer).next()
    }

    /// The option letter chosen in the answer: the first `A`–`Z` character of
    /// the trimmed payload, kept only when it is a valid letter `A`–`J`.
    pub fn predicted_letter(&self) -> Option<Letter> {
        let text = self.answer()?.text.trim();
        let c = text.chars().find(|c| c.is_ascii_uppercase())?;
        Letter::from_char(c)
    }

    pub fn has_retrieval(&self) -> bool {
        self.segments_of(SegmentKind::Retrieve).next().is_some()
    }

    /// Reasoning history: think and query segments.
    pub fn history(&self) -> String {
        join_texts(self.segments.iter().filter(|s| matches!(s.kind, SegmentKind::Think | SegmentKind::Query)))
    }

    /// Retrieved knowledge.
    pub fn knowledge(&self) -> String {
        join_texts(self.segments_of(SegmentKind::Retrieve))
    }

    pub fn query_text(&self) -> String {
        join_texts(self.segments_of(SegmentKind::Query))
    }

    /// `true` at every generated position excluded from the loss.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tokens.len()];
        for s in self.segments.iter().filter(|s| s.loss_masked) {
            mask[s.token_span.clone()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Generated tokens with every retrieve span deleted, and the answer
    /// position remapped into that stream.
    pub fn without_retrieval(&self) -> (Vec<TokenId>, Option<usize>) {
        let mask: Vec<bool> = {
            let mut m = vec![false; self.tokens.len()];
            for s in self.segments_of(SegmentKind::Retrieve) {
                m[s.token_span.clone()].iter_mut().for_each(|x| *x = true);
            }
            m
        };
        let tokens = self
            .tokens
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| !m)
            .map(|(&t, _)| t)
            .collect();
        let pos = self
            .answer_position
            .map(|p| p - mask[..p].iter().filter(|&&m| m).count());
        (tokens, pos)
    }

    /// Drops the answer segment (and anything after it), keeping the history.
    pub fn truncate_before_answer(&self) -> Trajectory {
        let cut = self
            .segments
            .iter()
            .position(|s| s.kind == SegmentKind::Answer)
            .unwrap_or(self.segments.len());
        let end = self.segments[..cut].last().map(|s| s.token_span.end).unwrap_or(0);
        Trajectory {
            prompt_tokens: self.prompt_tokens.clone(),
            images: self.images.clone(),
            segments: self.segments[..cut].to_vec(),
            tokens: self.tokens[..end].to_vec(),
            answer_position: None,
            violation: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.violation.is_none() && self.answer_position.is_some()
    }
}

fn join_texts<'a>(segs: impl Iterator<Item = &'a Segment>) -> String {
    segs.map(|s| s.text.trim()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

/// Incremental checker for the segment grammar; the first violation wins.
#[derive(Debug, Clone, Default)]
pub struct Grammar {
    open: Option<SegmentKind>,
    last: Option<SegmentKind>,
    answers: usize,
}

impl Grammar {
    /// State after an already-accepted history ending in `last`.
    pub fn resume(last: Option<SegmentKind>, answers: usize) -> Self {
        Grammar { open: None, last, answers }
    }

    pub fn open_kind(&self) -> Option<SegmentKind> {
        self.open
    }

    pub fn last_closed(&self) -> Option<SegmentKind> {
        self.last
    }

    pub fn open(&mut self, kind: SegmentKind) -> Result<(), FormatError> {
        if let Some(open) = self.open {
            return Err(FormatError::UnclosedTag { kind: open });
        }
        let after_query = self.last == Some(SegmentKind::Query);
        if after_query != (kind == SegmentKind::Retrieve) {
            return Err(FormatError::QueryWithoutRetrieve);
        }
        if kind == SegmentKind::Answer && self.answers > 0 {
            return Err(FormatError::MultipleAnswers);
        }
        self.open = Some(kind);
        Ok(())
    }

    pub fn close(&mut self, kind: SegmentKind) -> Result<(), FormatError> {
        match self.open {
            Some(open) if open == kind => {
                self.open = None;
                self.last = Some(kind);
                if kind == SegmentKind::Answer {
                    self.answers += 1;
                }
                Ok(())
            }
            expected => Err(FormatError::InterleavedTags { expected, found: kind }),
        }
    }

    pub fn text(&mut self, text: &str) -> Result<(), FormatError> {
        if self.open.is_none() && !text.trim().is_empty() {
            return Err(FormatError::TextOutsideTags {
                text: text.trim().to_string(),
            });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if let Some(kind) = self.open {
            return Err(FormatError::UnclosedTag { kind });
        }
        if self.last == Some(SegmentKind::Query) {
            return Err(FormatError::QueryWithoutRetrieve);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Lexing, parsing, rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lexeme<'a> {
    Tag { kind: SegmentKind, open: bool },
    Text(&'a str),
}

/// Splits text into tag literals and the free text between them.
pub fn lex(text: &str) -> Vec<Lexeme<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    let mut pending = 0;
    while pending < rest.len() {
        let Some(off) = rest[pending..].find('<') else {
            break;
        };
        let at = pending + off;
        let hit = vocab::TAG_LITERALS
            .iter()
            .enumerate()
            .find(|(_, lit)| rest[at..].starts_with(*lit));
        match hit {
            Some((id, lit)) => {
                if at > 0 {
                    out.push(Lexeme::Text(&rest[..at]));
                }
                let kind = SegmentKind::ALL[id / 2];
                out.push(Lexeme::Tag { kind, open: id % 2 == 0 });
                rest = &rest[at + lit.len()..];
                pending = 0;
            }
            None => pending = at + 1,
        }
    }
    if !rest.is_empty() {
        out.push(Lexeme::Text(rest));
    }
    out
}

/// Appends segments to a trajectory while keeping spans contiguous.
#[derive(Debug, Default)]
pub struct TrajectoryBuilder {
    traj: Trajectory,
}

impl TrajectoryBuilder {
    pub fn new(prompt_tokens: Vec<TokenId>, images: Vec<Vec<f64>>) -> Self {
        TrajectoryBuilder {
            traj: Trajectory {
                prompt_tokens,
                images,
                ..Default::default()
            },
        }
    }

    pub fn from_trajectory(traj: Trajectory) -> Self {
        TrajectoryBuilder { traj }
    }

    pub fn len(&self) -> usize {
        self.traj.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.traj.tokens
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn push_segment(&mut self, kind: SegmentKind, text: impl Into<String>, content: &[TokenId]) {
        let start = self.traj.tokens.len();
        self.traj.tokens.push(vocab::tag_id(kind, true));
        if kind == SegmentKind::Answer {
            self.traj.answer_position = Some(self.traj.tokens.len());
        }
        self.traj.tokens.extend_from_slice(content);
        self.traj.tokens.push(vocab::tag_id(kind, false));
        self.traj.segments.push(Segment {
            kind,
            text: text.into(),
            token_span: start..self.traj.tokens.len(),
            loss_masked: kind == SegmentKind::Retrieve,
        });
    }

    pub fn push_violation(&mut self, error: FormatError, tokens: &[TokenId], text: impl Into<String>) {
        let start = self.traj.tokens.len();
        self.traj.tokens.extend_from_slice(tokens);
        self.traj.violation = Some(Violation {
            error,
            span: start..self.traj.tokens.len(),
            text: text.into(),
        });
    }

    pub fn finish(self) -> Trajectory {
        self.traj
    }
}

/// Parses tagged text. Segment texts are kept verbatim.
pub fn parse_trajectory(text: &str, vocab: &Vocab) -> Result<Trajectory, FormatError> {
    let mut grammar = Grammar::default();
    let mut builder = TrajectoryBuilder::default();
    let mut open: Option<(SegmentKind, String)> = None;
    for lexeme in lex(text) {
        match lexeme {
            Lexeme::Text(t) => {
                grammar.text(t)?;
                if let Some((_, buf)) = open.as_mut() {
                    buf.push_str(t);
                }
            }
            Lexeme::Tag { kind, open: true } => {
                grammar.open(kind)?;
                open = Some((kind, String::new()));
            }
            Lexeme::Tag { kind, open: false } => {
                grammar.close(kind)?;
                let (kind, body) = open.take().expect("grammar tracks the open segment");
                let content = vocab.encode_text(&body);
                builder.push_segment(kind, body, &content);
            }
        }
    }
    grammar.finish()?;
    Ok(builder.finish())
}

pub fn render_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for s in &traj.segments {
        out.push_str(s.kind.open_tag());
        out.push_str(&s.text);
        out.push_str(s.kind.close_tag());
    }
    if let Some(v) = &traj.violation {
        out.push_str(&v.text);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatFlags {
    pub has_think: bool,
    pub retrieval_activated: bool,
    pub well_formed: bool,
}

pub fn format_flags(traj: &Trajectory) -> FormatFlags {
    let has_think = traj.segments.iter().any(|s| s.kind == SegmentKind::Think);
    let retrieval_activated = traj
        .segments
        .windows(2)
        .any(|w| w[0].kind == SegmentKind::Query && w[1].kind == SegmentKind::Retrieve);
    let grammar_ok = {
        let mut g = Grammar::default();
        traj.segments
            .iter()
            .try_for_each(|s| g.open(s.kind).and_then(|_| g.close(s.kind)))
            .and_then(|_| g.finish())
            .is_ok()
    };
    let ends_with_answer = traj.segments.last().map(|s| s.kind) == Some(SegmentKind::Answer);
    FormatFlags {
        has_think,
        retrieval_activated,
        well_formed: traj.violation.is_none() && grammar_ok && ends_with_answer,
    }
}
