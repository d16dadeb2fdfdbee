//! Token vocabulary and tokenizer.
//!
//! Ids are dense from zero: the eight tag literals first, then the option
//! letters `A`–`J`, then the out-of-vocabulary token, then corpus words in
//! sorted order. Tags are atomic tokens. Everything else is split on
//! non-alphanumeric characters and lowercased, except that a standalone
//! uppercase `A`–`J` becomes an option-letter token.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::{KBDoc, Letter, QAItem};
use crate::protocol::SegmentKind;

pub type TokenId = u32;

pub const TAG_COUNT: usize = 8;
pub const LETTER_BASE: TokenId = TAG_COUNT as TokenId;
pub const OOV: TokenId = LETTER_BASE + Letter::COUNT as TokenId;
pub const FIRST_WORD: TokenId = OOV + 1;
pub const OOV_STR: &str = "<unk>";

/// Tag literals in id order.
pub const TAG_LITERALS: [&str; TAG_COUNT] = [
    "<think>",
    "</think>",
    "<query>",
    "</query>",
    "<retrieve>",
    "</retrieve>",
    "<answer>",
    "</answer>",
];

pub fn tag_id(kind: SegmentKind, open: bool) -> TokenId {
    let base = match kind {
        SegmentKind::Think => 0,
        SegmentKind::Query => 2,
        SegmentKind::Retrieve => 4,
        SegmentKind::Answer => 6,
    };
    base + if open { 0 } else { 1 }
}

pub fn letter_id(letter: Letter) -> TokenId {
    LETTER_BASE + letter.index() as TokenId
}

/// What a token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Tag { kind: SegmentKind, open: bool },
    Letter(Letter),
    Oov,
    Word,
}

pub fn classify(id: TokenId) -> TokenClass {
    if (id as usize) < TAG_COUNT {
        let kind = SegmentKind::ALL[id as usize / 2];
        TokenClass::Tag {
            kind,
            open: id.is_multiple_of(2),
        }
    } else if id < OOV {
        TokenClass::Letter(Letter::from_index((id - LETTER_BASE) as usize).expect("letter range"))
    } else if id == OOV {
        TokenClass::Oov
    } else {
        TokenClass::Word
    }
}

/// A lexical piece of free text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Letter(Letter),
    Word(String),
}

/// Splits free text (no tags) into pieces.
pub fn split_text(text: &str) -> Vec<Piece> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut cs = w.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) if Letter::from_char(c).is_some() => Piece::Letter(Letter::from_char(c).unwrap()),
                _ => Piece::Word(w.to_lowercase()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Vocabulary over the given words (lowercased, deduplicated, sorted).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = TAG_LITERALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(Letter::all().map(|l| l.as_char().to_string()));
        tokens.push(OOV_STR.to_string());
        let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !w.is_empty() && !reserved.contains(w))
            .collect();
        tokens.extend(words);
        Self::from_token_list(tokens).expect("constructed vocabulary is valid")
    }

    /// Vocabulary covering every word piece of the given texts.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = BTreeSet::new();
        for t in texts {
            for p in split_text(t) {
                if let Piece::Word(w) = p {
                    words.insert(w);
                }
            }
        }
        Self::from_words(words)
    }

    /// Rebuilds a vocabulary from its full token list (checkpoint form).
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < FIRST_WORD as usize {
            return Err("token list shorter than the reserved prefix".into());
        }
        for (i, lit) in TAG_LITERALS.iter().enumerate() {
            if tokens[i] != *lit {
                return Err(format!("token {i} must be `{lit}`"));
            }
        }
        for l in Letter::all() {
            if tokens[letter_id(l) as usize] != l.as_char().to_string() {
                return Err(format!("token {} must be `{l}`", letter_id(l)));
            }
        }
        if tokens[OOV as usize] != OOV_STR {
            return Err(format!("token {OOV} must be `{OOV_STR}`"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(format!("duplicate token `{t}`"));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(OOV_STR)
    }

    pub fn word_id(&self, word: &str) -> TokenId {
        match self.index.get(word) {
            Some(&id) if id >= FIRST_WORD => id,
            _ => OOV,
        }
    }

    pub fn piece_id(&self, piece: &Piece) -> TokenId {
        match piece {
            Piece::Letter(l) => letter_id(*l),
            Piece::Word(w) => self.word_id(w),
        }
    }

    /// Tokenizes free text; tag literals inside are not recognized here.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        split_text(text).iter().map(|p| self.piece_id(p)).collect()
    }

    /// Tokenizes text that may contain tag literals.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for lexeme in crate::protocol::lex(text) {
            match lexeme {
                crate::protocol::Lexeme::Tag { kind, open } => out.push(tag_id(kind, open)),
                crate::protocol::Lexeme::Text(t) => out.extend(self.encode_text(t)),
            }
        }
        out
    }

    /// Renders non-tag tokens as space-joined text.
    pub fn decode_text(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token_str(i)).collect::<Vec<_>>().join(" ")
    }

    /// Renders any tokens, tags inline without surrounding spaces.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_tag = true;
        for &id in ids {
            let is_tag = matches!(classify(id), TokenClass::Tag { .. });
            if !is_tag && !prev_tag {
                out.push(' ');
            }
            out.push_str(self.token_str(id));
            prev_tag = is_tag;
        }
        out
    }
}

/// Vocabulary over questions, options, explanations and KB texts.
pub fn corpus_vocab(qa: &[QAItem], kb: &[KBDoc]) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for q in qa {
        texts.push(&q.question);
        texts.extend(q.options.values().map(String::as_str));
        texts.extend(q.explanation.as_deref());
    }
    texts.extend(kb.iter().map(|d| d.text.as_str()));
    Vocab::from_texts(texts)
}
