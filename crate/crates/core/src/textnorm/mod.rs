//! Text normalization, CJK-aware pre-tokenization, WordPiece and vocabularies.

mod normalize;
mod vocab;
mod wordpiece;

pub use normalize::{normalize, normalize_bytes, NormalizedText, TradMap};
pub use vocab::{build_vocab, Vocabulary, CLS, MASK, NUM_SPECIALS, PAD, SEP, SPECIALS, UNK};
pub use wordpiece::{
    cjk_pretokenize, detokenize, is_cjk, tokenize_sentence, wordpiece, Token, Unit,
    DEFAULT_MAX_PIECE_CHARS,
};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("traditional map line {line}: {reason}")]
    TradMap { line: usize, reason: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Half-open `[start, end)` range over characters or tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(d)?;
        Ok(Span { start, end })
    }
}

/// Vocabulary plus the normalization table and WordPiece limit: everything
/// needed to turn raw text into token ids.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub trad: TradMap,
    pub max_piece_chars: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Tokenizer {
            vocab,
            trad: TradMap::default(),
            max_piece_chars: DEFAULT_MAX_PIECE_CHARS,
        }
    }

    pub fn with_trad_map(mut self, trad: TradMap) -> Self {
        self.trad = trad;
        self
    }

    pub fn load(vocab: &Path, trad: Option<&Path>) -> Result<Self, TextError> {
        let vocab = Vocabulary::load(vocab)?;
        let trad = match trad {
            Some(p) => TradMap::load(p)?,
            None => TradMap::default(),
        };
        Ok(Tokenizer::new(vocab).with_trad_map(trad))
    }

    pub fn normalize(&self, raw: &str) -> NormalizedText {
        normalize(raw, &self.trad)
    }

    pub fn tokenize(&self, text: &NormalizedText) -> Vec<Token> {
        tokenize_sentence(text, &self.vocab, self.max_piece_chars)
    }

    /// Normalizes and tokenizes, returning only ids.
    pub fn encode(&self, raw: &str) -> Vec<u32> {
        self.tokenize(&self.normalize(raw))
            .into_iter()
            .map(|t| t.id)
            .collect()
    }
}
