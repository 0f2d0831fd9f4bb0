use std::collections::HashMap;
use std::path::Path;

use super::TextError;

/// Normalized text together with the provenance of every output character.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizedText {
    pub text: String,
    /// `charmap[i]` is the index of the input character that produced output
    /// character `i`.
    pub charmap: Vec<usize>,
}

impl NormalizedText {
    pub fn char_len(&self) -> usize {
        self.charmap.len()
    }

    pub fn chars(&self) -> Vec<char> {
        self.text.chars().collect()
    }

    /// Substring by character range.
    pub fn slice(&self, start: usize, end: usize) -> String {
        self.text.chars().skip(start).take(end - start).collect()
    }
}

/// Traditional-to-simplified character table.
///
/// Chains (`a -> b`, `b -> c`) are resolved at construction so a single pass
/// of [`normalize`] reaches a fixed point; cycles are rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TradMap {
    map: HashMap<char, char>,
}

impl TradMap {
    pub fn from_pairs<I: IntoIterator<Item = (char, char)>>(pairs: I) -> Result<Self, TextError> {
        let mut raw: HashMap<char, char> = HashMap::new();
        for (i, (from, to)) in pairs.into_iter().enumerate() {
            if let Some(prev) = raw.insert(from, to) {
                if prev != to {
                    return Err(TextError::TradMap {
                        line: i + 1,
                        reason: format!("'{from}' mapped to both '{prev}' and '{to}'"),
                    });
                }
            }
        }
        Self::resolve(raw)
    }

    /// Parses the `from to` line format. Blank lines and `#` comments are skipped.
    pub fn parse(src: &str) -> Result<Self, TextError> {
        let mut raw: HashMap<char, char> = HashMap::new();
        for (i, line) in src.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |reason: String| TextError::TradMap {
                line: line_no,
                reason,
            };
            if fields.len() != 2 {
                return Err(bad(format!("expected 2 fields, found {}", fields.len())));
            }
            let single = |s: &str| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(bad(format!("'{s}' is not a single character"))),
                }
            };
            let from = single(fields[0])?;
            let to = single(fields[1])?;
            if let Some(prev) = raw.insert(from, to) {
                if prev != to {
                    return Err(bad(format!("'{from}' mapped to both '{prev}' and '{to}'")));
                }
            }
        }
        Self::resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let src = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&src)
    }

    fn resolve(raw: HashMap<char, char>) -> Result<Self, TextError> {
        let step = |c: char| -> Option<char> {
            let c = c.to_ascii_lowercase();
            raw.get(&c).map(|t| t.to_ascii_lowercase())
        };
        let mut map = HashMap::with_capacity(raw.len());
        for &from in raw.keys() {
            let mut cur = from.to_ascii_lowercase();
            let mut hops = 0;
            while let Some(next) = step(cur) {
                if next == cur {
                    break;
                }
                cur = next;
                hops += 1;
                if hops > raw.len() {
                    return Err(TextError::TradMap {
                        line: 0,
                        reason: format!("mapping cycle through '{from}'"),
                    });
                }
            }
            map.insert(from, cur);
        }
        Ok(TradMap { map })
    }

    pub fn get(&self, c: char) -> Option<char> {
        self.map.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.map.contains_key(&c)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn normalize_char(c: char, trad: &TradMap) -> char {
    let c = c.to_ascii_lowercase();
    match trad.get(c) {
        Some(t) => t,
        None => c,
    }
}

/// Lowercases ASCII letters and applies the traditional-to-simplified table.
/// Every other character passes through unchanged.
pub fn normalize(raw: &str, trad: &TradMap) -> NormalizedText {
    let mut text = String::with_capacity(raw.len());
    let mut charmap = Vec::with_capacity(raw.len());
    for (i, c) in raw.chars().enumerate() {
        let out = normalize_char(c, trad);
        text.push(out);
        charmap.push(i);
    }
    NormalizedText { text, charmap }
}

/// Like [`normalize`] but starts from raw bytes.
pub fn normalize_bytes(raw: &[u8], trad: &TradMap) -> Result<NormalizedText, TextError> {
    let s = std::str::from_utf8(raw).map_err(|e| TextError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    Ok(normalize(s, trad))
}
