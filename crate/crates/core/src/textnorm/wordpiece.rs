use super::{NormalizedText, Span, Vocabulary, UNK};

pub const DEFAULT_MAX_PIECE_CHARS: usize = 100;

/// CJK Unified Ideographs and Extension A.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF)
}

/// A basic unit: one ideograph or one whitespace-delimited non-CJK run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub text: String,
    pub span: Span,
}

/// One token with the character span it covers in the normalized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub span: Span,
}

/// Splits normalized text into basic units. Every ideograph becomes its own
/// unit; maximal runs of other non-whitespace characters form word units.
pub fn cjk_pretokenize(text: &NormalizedText) -> Vec<Unit> {
    let mut units = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let flush = |units: &mut Vec<Unit>, word: &mut String, start: usize, end: usize| {
        if !word.is_empty() {
            units.push(Unit {
                text: std::mem::take(word),
                span: Span::new(start, end),
            });
        }
    };
    let mut n = 0;
    for (i, c) in text.text.chars().enumerate() {
        n = i + 1;
        if c.is_whitespace() {
            flush(&mut units, &mut word, word_start, i);
        } else if is_cjk(c) {
            flush(&mut units, &mut word, word_start, i);
            units.push(Unit {
                text: c.to_string(),
                span: Span::new(i, i + 1),
            });
        } else {
            if word.is_empty() {
                word_start = i;
            }
            word.push(c);
        }
    }
    flush(&mut units, &mut word, word_start, n);
    units
}

/// Greedy longest-match-first segmentation; pieces are returned with their
/// character counts. `None` means the unit maps to `[UNK]`.
fn segment(unit: &str, vocab: &Vocabulary, max_piece_chars: usize) -> Option<Vec<(u32, usize)>> {
    let bounds: Vec<usize> = unit
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(unit.len()))
        .collect();
    let n = bounds.len() - 1;
    if n == 0 || n > max_piece_chars {
        return None;
    }
    let mut pieces = Vec::new();
    let mut key = String::with_capacity(unit.len() + 2);
    let mut start = 0;
    while start < n {
        let mut found = None;
        for end in (start + 1..=n).rev() {
            key.clear();
            if start > 0 {
                key.push_str("##");
            }
            key.push_str(&unit[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&key) {
                found = Some((id, end));
                break;
            }
        }
        let (id, end) = found?;
        pieces.push((id, end - start));
        start = end;
    }
    Some(pieces)
}

/// WordPiece ids for one unit.
pub fn wordpiece(unit: &str, vocab: &Vocabulary, max_piece_chars: usize) -> Vec<u32> {
    match segment(unit, vocab, max_piece_chars) {
        Some(p) => p.into_iter().map(|(id, _)| id).collect(),
        None => vec![UNK],
    }
}

/// Pre-tokenizes then WordPiece-segments each unit. Pieces of a unit split
/// the unit's span by their character counts; `[UNK]` takes the whole unit.
pub fn tokenize_sentence(
    text: &NormalizedText,
    vocab: &Vocabulary,
    max_piece_chars: usize,
) -> Vec<Token> {
    let mut out = Vec::new();
    for unit in cjk_pretokenize(text) {
        match segment(&unit.text, vocab, max_piece_chars) {
            Some(pieces) => {
                let mut at = unit.span.start;
                for (id, chars) in pieces {
                    out.push(Token {
                        id,
                        span: Span::new(at, at + chars),
                    });
                    at += chars;
                }
            }
            None => out.push(Token {
                id: UNK,
                span: unit.span,
            }),
        }
    }
    out
}

/// Rebuilds text of `char_len` characters from tokens, writing a space into
/// every position no token covers.
pub fn detokenize(tokens: &[Token], vocab: &Vocabulary, char_len: usize) -> String {
    let mut chars = vec![' '; char_len];
    for t in tokens {
        let surface = vocab.surface(t.id).unwrap_or("");
        for (slot, c) in chars[t.span.range()].iter_mut().zip(surface.chars()) {
            *slot = c;
        }
    }
    chars.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::{normalize, TradMap};

    fn norm(s: &str) -> NormalizedText {
        normalize(s, &TradMap::default())
    }

    fn texts(units: &[Unit]) -> Vec<&str> {
        units.iter().map(|u| u.text.as_str()).collect()
    }

    #[test]
    fn pretokenize_plain_word() {
        let u = cjk_pretokenize(&norm("hello"));
        assert_eq!(texts(&u), ["hello"]);
        assert_eq!(u[0].span, Span::new(0, 5));
    }

    #[test]
    fn pretokenize_ideographs_split() {
        let u = cjk_pretokenize(&norm("中文字"));
        assert_eq!(texts(&u), ["中", "文", "字"]);
        let spans: Vec<Span> = u.iter().map(|u| u.span).collect();
        assert_eq!(spans, [Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)]);
    }

    #[test]
    fn pretokenize_mixed_script() {
        let u = cjk_pretokenize(&norm("ok中go"));
        assert_eq!(texts(&u), ["ok", "中", "go"]);
        let spans: Vec<Span> = u.iter().map(|u| u.span).collect();
        assert_eq!(spans, [Span::new(0, 2), Span::new(2, 3), Span::new(3, 5)]);
    }

    #[test]
    fn pretokenize_extension_a_and_whitespace() {
        let u = cjk_pretokenize(&norm("  \u{3400}x\ty  "));
        assert_eq!(texts(&u), ["\u{3400}", "x", "y"]);
    }

    #[test]
    fn longest_prefix_wins() {
        let v = Vocabulary::with_pieces(["a", "##b", "ab"]).unwrap();
        assert_eq!(wordpiece("ab", &v, 100), vec![v.id("ab").unwrap()]);
    }

    #[test]
    fn falls_back_to_continuations() {
        let v = Vocabulary::with_pieces(["a", "##b"]).unwrap();
        assert_eq!(wordpiece("ab", &v, 100), vec![5, 6]);
    }

    #[test]
    fn no_prefix_gives_unk() {
        let v = Vocabulary::with_pieces(["a", "##b"]).unwrap();
        assert_eq!(wordpiece("xyz", &v, 100), vec![UNK]);
        // prefix matches but the tail does not
        assert_eq!(wordpiece("abz", &v, 100), vec![UNK]);
    }

    #[test]
    fn over_long_unit_gives_unk() {
        let v = Vocabulary::with_pieces(["a", "##a"]).unwrap();
        assert_eq!(wordpiece("aaaa", &v, 3), vec![UNK]);
        assert_eq!(wordpiece("aaa", &v, 3), vec![5, 6, 6]);
    }

    #[test]
    fn tokenize_empty() {
        let v = Vocabulary::with_pieces(["a"]).unwrap();
        assert!(tokenize_sentence(&norm(""), &v, 100).is_empty());
    }

    #[test]
    fn tokenize_single_ideograph() {
        let v = Vocabulary::with_pieces(["中"]).unwrap();
        let t = tokenize_sentence(&norm("中"), &v, 100);
        assert_eq!(
            t,
            vec![Token {
                id: 5,
                span: Span::new(0, 1)
            }]
        );
    }

    #[test]
    fn tokenize_harry_potter() {
        let v = Vocabulary::with_pieces(["harry", "potter"]).unwrap();
        let t = tokenize_sentence(&norm("Harry Potter"), &v, 100);
        assert_eq!(
            t,
            vec![
                Token {
                    id: 5,
                    span: Span::new(0, 5)
                },
                Token {
                    id: 6,
                    span: Span::new(6, 12)
                }
            ]
        );
    }

    #[test]
    fn piece_spans_subdivide_unit() {
        let v = Vocabulary::with_pieces(["ro", "##wl", "##ing"]).unwrap();
        let t = tokenize_sentence(&norm("x rowling"), &v, 100);
        let spans: Vec<Span> = t.iter().map(|t| t.span).collect();
        assert_eq!(
            spans,
            [
                Span::new(0, 1),
                Span::new(2, 4),
                Span::new(4, 6),
                Span::new(6, 9)
            ]
        );
        assert_eq!(t[0].id, UNK);
        assert_eq!(detokenize(&t[1..], &v, 9), "  rowling");
    }
}
