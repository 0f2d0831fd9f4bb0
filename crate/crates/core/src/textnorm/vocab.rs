use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{cjk_pretokenize, NormalizedText, TextError};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const CONTINUATION: &str = "##";

/// Token/id bijection. Ids `0..5` are always the five specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Validates and indexes a token list whose first five entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.len() < SPECIALS.len() {
            return Err(TextError::Vocab(format!(
                "{} tokens, need at least the {} specials",
                tokens.len(),
                SPECIALS.len()
            )));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(TextError::Vocab(format!(
                    "id {i} must be {want}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if i >= SPECIALS.len() {
                if tok.is_empty() || tok == CONTINUATION {
                    return Err(TextError::Vocab(format!("id {i}: empty piece")));
                }
                if tok.chars().any(char::is_whitespace) {
                    return Err(TextError::Vocab(format!(
                        "id {i}: {tok:?} contains whitespace"
                    )));
                }
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(TextError::Vocab(format!(
                    "duplicate token {tok:?} at id {i}"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Specials followed by `pieces`.
    pub fn with_pieces<I, S>(pieces: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(pieces.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    pub fn parse(src: &str) -> Result<Self, TextError> {
        Self::from_tokens(src.lines().map(str::to_owned).collect())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let src = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&src)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let io = |source| TextError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for tok in &self.tokens {
            writeln!(f, "{tok}").map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// Surface text of a piece with any continuation marker removed.
    pub fn surface(&self, id: u32) -> Option<&str> {
        self.token(id)
            .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t))
    }
}

fn ranked(counts: HashMap<char, usize>, min_count: usize) -> Vec<(char, usize)> {
    let mut v: Vec<(char, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_count)
        .collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Character-level vocabulary: word-initial characters, then `##`
/// continuation characters, each block by descending frequency with
/// lexicographic tie-break, truncated to `max_size` entries in total.
pub fn build_vocab<'a, I>(
    corpus: I,
    min_count: usize,
    max_size: usize,
) -> Result<Vocabulary, TextError>
where
    I: IntoIterator<Item = &'a NormalizedText>,
{
    let mut initial: HashMap<char, usize> = HashMap::new();
    let mut continuation: HashMap<char, usize> = HashMap::new();
    let mut seen = 0usize;
    for text in corpus {
        seen += 1;
        for unit in cjk_pretokenize(text) {
            for (i, c) in unit.text.chars().enumerate() {
                let table = if i == 0 {
                    &mut initial
                } else {
                    &mut continuation
                };
                *table.entry(c).or_default() += 1;
            }
        }
    }
    if seen == 0 {
        return Err(TextError::EmptyCorpus);
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked(initial, min_count)
            .into_iter()
            .map(|(c, _)| c.to_string()),
    );
    tokens.extend(
        ranked(continuation, min_count)
            .into_iter()
            .map(|(c, _)| format!("{CONTINUATION}{c}")),
    );
    tokens.truncate(max_size.max(SPECIALS.len()));
    Vocabulary::from_tokens(tokens)
}
