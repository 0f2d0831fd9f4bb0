//! Annotated-corpus model and ingestion.
//!
//! Phrase and entity annotations arrive as character spans over normalized
//! text, either from the corpus file or from a dictionary lookup, and are
//! aligned here to token-index ranges.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::{NormalizedText, Span, Token, Tokenizer};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("reversed span {0}")]
    ReversedSpan(Span),
    #[error("span {span} exceeds text length {len}")]
    OutOfRange { span: Span, len: usize },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("dialogue pattern {0:?} is not one of QR, QRQ, QRR, QQR")]
    BadPattern(String),
    #[error("empty dialogue thread")]
    EmptyThread,
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AnnotateError {
    fn at_line(self, line: usize) -> Self {
        match self {
            AnnotateError::ReversedSpan(span) => AnnotateError::Line {
                line,
                reason: format!("reversed span {span} at line {line}"),
            },
            AnnotateError::Line { .. } => self,
            other => AnnotateError::Line {
                line,
                reason: other.to_string(),
            },
        }
    }
}

/// A tokenized sentence with phrase and entity spans as token-index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub text: NormalizedText,
    pub tokens: Vec<Token>,
    pub phrase_spans: Vec<Span>,
    pub entity_spans: Vec<Span>,
}

impl AnnotatedSentence {
    /// Aligns character-offset annotations to tokens and enforces the span
    /// invariants (sorted, non-overlapping, entities never split by a phrase).
    pub fn from_char_spans(
        text: NormalizedText,
        tokens: Vec<Token>,
        phrases: &[Span],
        entities: &[Span],
    ) -> Result<Self, AnnotateError> {
        let len = text.char_len();
        for s in phrases.iter().chain(entities) {
            if s.start >= s.end {
                return Err(AnnotateError::ReversedSpan(*s));
            }
            if s.end > len {
                return Err(AnnotateError::OutOfRange { span: *s, len });
            }
        }
        let phrase_spans = align_spans(phrases, &tokens)?;
        let entity_spans = align_spans(entities, &tokens)?;
        Ok(Self::assemble(text, tokens, phrase_spans, entity_spans))
    }

    /// Builds from token-index ranges directly. Ranges outside the token
    /// list are rejected; overlaps are merged and conflicts resolved.
    pub fn from_token_spans(
        text: NormalizedText,
        tokens: Vec<Token>,
        phrases: Vec<Span>,
        entities: Vec<Span>,
    ) -> Result<Self, AnnotateError> {
        let n = tokens.len();
        for s in phrases.iter().chain(&entities) {
            if s.start >= s.end {
                return Err(AnnotateError::ReversedSpan(*s));
            }
            if s.end > n {
                return Err(AnnotateError::OutOfRange { span: *s, len: n });
            }
        }
        Ok(Self::assemble(
            text,
            tokens,
            merge_sorted(phrases),
            merge_sorted(entities),
        ))
    }

    fn assemble(
        text: NormalizedText,
        tokens: Vec<Token>,
        phrases: Vec<Span>,
        entities: Vec<Span>,
    ) -> Self {
        let phrase_spans = drop_conflicting_phrases(phrases, &entities);
        AnnotatedSentence {
            text,
            tokens,
            phrase_spans,
            entity_spans: entities,
        }
    }

    /// A sentence over raw token ids, one placeholder character per token.
    /// Spans are token ranges. Meant for synthetic corpora.
    pub fn from_ids(
        ids: &[u32],
        phrases: Vec<Span>,
        entities: Vec<Span>,
    ) -> Result<Self, AnnotateError> {
        let n = ids.len();
        let tokens = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Token {
                id,
                span: Span::new(i, i + 1),
            })
            .collect();
        let text = NormalizedText {
            text: "x".repeat(n),
            charmap: (0..n).collect(),
        };
        Self::from_token_spans(text, tokens, phrases, entities)
    }

    /// Plain tokenization without annotations.
    pub fn plain(tokenizer: &Tokenizer, raw: &str) -> Self {
        let text = tokenizer.normalize(raw);
        let tokens = tokenizer.tokenize(&text);
        AnnotatedSentence {
            text,
            tokens,
            phrase_spans: Vec::new(),
            entity_spans: Vec::new(),
        }
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Character span covered by a token range.
    pub fn char_span(&self, tokens: Span) -> Span {
        Span::new(
            self.tokens[tokens.start].span.start,
            self.tokens[tokens.end - 1].span.end,
        )
    }

    /// Keeps the first `n` tokens, dropping spans that no longer fit whole.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.tokens.len() {
            return;
        }
        self.tokens.truncate(n);
        self.phrase_spans.retain(|s| s.end <= n);
        self.entity_spans.retain(|s| s.end <= n);
    }

    pub fn to_record(&self) -> SentenceRecord {
        SentenceRecord {
            text: self.text.text.clone(),
            phrases: self
                .phrase_spans
                .iter()
                .map(|s| self.char_span(*s))
                .collect(),
            entities: self
                .entity_spans
                .iter()
                .map(|s| self.char_span(*s))
                .collect(),
        }
    }
}

fn merge_sorted(mut spans: Vec<Span>) -> Vec<Span> {
    spans.sort();
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if last.overlaps(&s) => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

/// A phrase whose boundary falls strictly inside an entity is dropped.
fn drop_conflicting_phrases(phrases: Vec<Span>, entities: &[Span]) -> Vec<Span> {
    let inside = |x: usize, e: &Span| e.start < x && x < e.end;
    phrases
        .into_iter()
        .filter(|p| {
            !entities
                .iter()
                .any(|e| inside(p.start, e) || inside(p.end, e))
        })
        .collect()
}

/// Maps character ranges to the minimal token ranges covering every token
/// they overlap. Ranges touching no token are dropped; the result is sorted
/// with overlaps merged.
pub fn align_spans(char_spans: &[Span], tokens: &[Token]) -> Result<Vec<Span>, AnnotateError> {
    let mut out = Vec::with_capacity(char_spans.len());
    for s in char_spans {
        if s.start >= s.end {
            return Err(AnnotateError::ReversedSpan(*s));
        }
        let first = tokens.partition_point(|t| t.span.end <= s.start);
        let mut last = first;
        while last < tokens.len() && tokens[last].span.start < s.end {
            last += 1;
        }
        if last > first {
            out.push(Span::new(first, last));
        }
    }
    Ok(merge_sorted(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Phrase,
    Entity,
}

/// Surface strings for the dictionary annotator.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: Vec<(Vec<char>, SpanKind)>,
    by_first: HashMap<char, Vec<usize>>,
}

impl Lexicon {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, SpanKind)>,
        S: AsRef<str>,
    {
        let mut lex = Lexicon::default();
        for (surface, kind) in entries {
            let chars: Vec<char> = surface.as_ref().chars().collect();
            if chars.is_empty() || lex.entries.iter().any(|(c, k)| *c == chars && *k == kind) {
                continue;
            }
            lex.by_first
                .entry(chars[0])
                .or_default()
                .push(lex.entries.len());
            lex.entries.push((chars, kind));
        }
        // Longest first; on equal length entities win.
        for ids in lex.by_first.values_mut() {
            let entries = &lex.entries;
            ids.sort_by(|&a, &b| {
                entries[b].0.len().cmp(&entries[a].0.len()).then(
                    (entries[b].1 == SpanKind::Entity).cmp(&(entries[a].1 == SpanKind::Entity)),
                )
            });
        }
        lex
    }

    /// Reads `surface<TAB>phrase|entity` lines, normalizing each surface.
    pub fn parse(src: &str, tokenizer: &Tokenizer) -> Result<Self, AnnotateError> {
        let mut entries = Vec::new();
        for (i, line) in src.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| AnnotateError::Lexicon {
                line: i + 1,
                reason,
            };
            let (surface, kind) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad("expected surface<TAB>kind".into()))?;
            let kind = match kind.trim() {
                "phrase" => SpanKind::Phrase,
                "entity" => SpanKind::Entity,
                other => return Err(bad(format!("unknown kind {other:?}"))),
            };
            entries.push((tokenizer.normalize(surface).text, kind));
        }
        Ok(Lexicon::new(entries))
    }

    pub fn load(path: &Path, tokenizer: &Tokenizer) -> Result<Self, AnnotateError> {
        let src = std::fs::read_to_string(path).map_err(|source| AnnotateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&src, tokenizer)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Leftmost-longest, non-overlapping character matches.
    pub fn find(&self, text: &[char]) -> Vec<(Span, SpanKind)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < text.len() {
            let hit = self.by_first.get(&text[i]).and_then(|ids| {
                ids.iter().map(|&id| &self.entries[id]).find(|(chars, _)| {
                    text.len() - i >= chars.len() && text[i..i + chars.len()] == chars[..]
                })
            });
            match hit {
                Some((chars, kind)) => {
                    out.push((Span::new(i, i + chars.len()), *kind));
                    i += chars.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Phrase and entity token ranges found by dictionary lookup.
pub fn dictionary_annotate(
    text: &NormalizedText,
    tokens: &[Token],
    lexicon: &Lexicon,
) -> (Vec<Span>, Vec<Span>) {
    let chars = text.chars();
    let mut phrases = Vec::new();
    let mut entities = Vec::new();
    for (span, kind) in lexicon.find(&chars) {
        match kind {
            SpanKind::Phrase => phrases.push(span),
            SpanKind::Entity => entities.push(span),
        }
    }
    // Match spans are well-formed by construction.
    let phrases = align_spans(&phrases, tokens).expect("forward spans");
    let entities = align_spans(&entities, tokens).expect("forward spans");
    (drop_conflicting_phrases(phrases, &entities), entities)
}

/// One line of the sentence corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    #[serde(default)]
    pub phrases: Vec<Span>,
    #[serde(default)]
    pub entities: Vec<Span>,
}

impl SentenceRecord {
    pub fn annotate(&self, tokenizer: &Tokenizer) -> Result<AnnotatedSentence, AnnotateError> {
        let text = tokenizer.normalize(&self.text);
        let tokens = tokenizer.tokenize(&text);
        AnnotatedSentence::from_char_spans(text, tokens, &self.phrases, &self.entities)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Q,
    R,
}

impl Role {
    pub fn letter(self) -> char {
        match self {
            Role::Q => 'Q',
            Role::R => 'R',
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

pub const ADMITTED_PATTERNS: [&str; 4] = ["QR", "QRQ", "QRR", "QQR"];

/// Two or three query/response turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueThread {
    pub turns: Vec<(Role, AnnotatedSentence)>,
}

impl DialogueThread {
    pub fn new(turns: Vec<(Role, AnnotatedSentence)>) -> Result<Self, AnnotateError> {
        if turns.is_empty() {
            return Err(AnnotateError::EmptyThread);
        }
        let t = DialogueThread { turns };
        t.pattern()?;
        Ok(t)
    }

    pub fn roles(&self) -> String {
        self.turns.iter().map(|(r, _)| r.letter()).collect()
    }

    /// The role string, restricted to the admitted patterns.
    pub fn pattern(&self) -> Result<String, AnnotateError> {
        pattern_of(&self.turns.iter().map(|(r, _)| *r).collect::<Vec<_>>())
    }
}

pub fn pattern_of(roles: &[Role]) -> Result<String, AnnotateError> {
    let p: String = roles.iter().map(|r| r.letter()).collect();
    if ADMITTED_PATTERNS.contains(&p.as_str()) {
        Ok(p)
    } else {
        Err(AnnotateError::BadPattern(p))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: String,
    pub text: String,
}

/// One line of the dialogue corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub turns: Vec<TurnRecord>,
}

impl DialogueRecord {
    /// Threads longer than three turns are cut into sliding 3-turn windows;
    /// windows whose role pattern is not admitted are skipped.
    pub fn threads(&self, tokenizer: &Tokenizer) -> Result<Vec<DialogueThread>, AnnotateError> {
        let mut turns = Vec::with_capacity(self.turns.len());
        for t in &self.turns {
            let role = match t.role.as_str() {
                "Q" => Role::Q,
                "R" => Role::R,
                other => return Err(AnnotateError::BadPattern(format!("bad role {other:?}"))),
            };
            turns.push((role, AnnotatedSentence::plain(tokenizer, &t.text)));
        }
        if turns.is_empty() {
            return Err(AnnotateError::EmptyThread);
        }
        if turns.len() <= 3 {
            return Ok(vec![DialogueThread::new(turns)?]);
        }
        let threads: Vec<DialogueThread> = turns
            .windows(3)
            .filter_map(|w| DialogueThread::new(w.to_vec()).ok())
            .collect();
        if threads.is_empty() {
            let roles: String = turns.iter().map(|(r, _)| r.letter()).collect();
            return Err(AnnotateError::BadPattern(roles));
        }
        Ok(threads)
    }
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, AnnotateError> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|source| AnnotateError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Streaming reader over JSON Lines; blank lines are skipped.
pub struct JsonLines<R> {
    reader: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> JsonLines<R> {
    pub fn new(reader: R) -> Self {
        JsonLines {
            reader,
            line: 0,
            buf: String::new(),
        }
    }

    /// Next non-blank line with its 1-based line number.
    fn next_line(&mut self) -> Option<Result<(usize, &str), AnnotateError>> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) if self.buf.trim().is_empty() => continue,
                Ok(_) => return Some(Ok((self.line, self.buf.trim_end()))),
                Err(e) => {
                    return Some(Err(AnnotateError::Line {
                        line: self.line,
                        reason: e.to_string(),
                    }))
                }
            }
        }
    }

    pub fn next_record<T: serde::de::DeserializeOwned>(
        &mut self,
    ) -> Option<Result<(usize, T), AnnotateError>> {
        Some(self.next_line()?.and_then(|(line, text)| {
            serde_json::from_str(text)
                .map(|v| (line, v))
                .map_err(|e| AnnotateError::Line {
                    line,
                    reason: format!("malformed record: {e}"),
                })
        }))
    }
}

/// Sentence-corpus stream.
pub struct CorpusReader<'t, R> {
    lines: JsonLines<R>,
    tokenizer: &'t Tokenizer,
}

impl<R: BufRead> Iterator for CorpusReader<'_, R> {
    type Item = Result<AnnotatedSentence, AnnotateError>;

    fn next(&mut self) -> Option<Self::Item> {
        let item = self.lines.next_record::<SentenceRecord>()?;
        Some(item.and_then(|(line, rec)| rec.annotate(self.tokenizer).map_err(|e| e.at_line(line))))
    }
}

pub fn corpus_from_reader<R: BufRead>(reader: R, tokenizer: &Tokenizer) -> CorpusReader<'_, R> {
    CorpusReader {
        lines: JsonLines::new(reader),
        tokenizer,
    }
}

pub fn read_corpus<'t>(
    path: &Path,
    tokenizer: &'t Tokenizer,
) -> Result<CorpusReader<'t, std::io::BufReader<std::fs::File>>, AnnotateError> {
    Ok(corpus_from_reader(open(path)?, tokenizer))
}

/// Dialogue-corpus stream; one record may yield several windowed threads.
pub struct DialogueReader<'t, R> {
    lines: JsonLines<R>,
    tokenizer: &'t Tokenizer,
    pending: std::collections::VecDeque<DialogueThread>,
}

impl<R: BufRead> Iterator for DialogueReader<'_, R> {
    type Item = Result<DialogueThread, AnnotateError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(t) = self.pending.pop_front() {
                return Some(Ok(t));
            }
            let item = self.lines.next_record::<DialogueRecord>()?;
            match item
                .and_then(|(line, rec)| rec.threads(self.tokenizer).map_err(|e| e.at_line(line)))
            {
                Ok(threads) => self.pending.extend(threads),
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

pub fn dialogues_from_reader<R: BufRead>(
    reader: R,
    tokenizer: &Tokenizer,
) -> DialogueReader<'_, R> {
    DialogueReader {
        lines: JsonLines::new(reader),
        tokenizer,
        pending: Default::default(),
    }
}

pub fn read_dialogues<'t>(
    path: &Path,
    tokenizer: &'t Tokenizer,
) -> Result<DialogueReader<'t, std::io::BufReader<std::fs::File>>, AnnotateError> {
    Ok(dialogues_from_reader(open(path)?, tokenizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::Vocabulary;

    fn tok(spans: &[(usize, usize)]) -> Vec<Token> {
        spans
            .iter()
            .map(|&(s, e)| Token {
                id: 5,
                span: Span::new(s, e),
            })
            .collect()
    }

    fn tokenizer() -> Tokenizer {
        Tokenizer::new(
            Vocabulary::with_pieces([
                "harry", "potter", "is", "a", "series", "j", ".", "k", "rowling",
            ])
            .unwrap(),
        )
    }

    #[test]
    fn exact_token_match() {
        let t = tok(&[(0, 2), (2, 4), (5, 7)]);
        assert_eq!(
            align_spans(&[Span::new(2, 4)], &t).unwrap(),
            vec![Span::new(1, 2)]
        );
    }

    #[test]
    fn overlap_expands_to_both_tokens() {
        let t = tok(&[(0, 2), (2, 4)]);
        assert_eq!(
            align_spans(&[Span::new(0, 3)], &t).unwrap(),
            vec![Span::new(0, 2)]
        );
    }

    #[test]
    fn empty_and_uncovered_spans() {
        let t = tok(&[(0, 2), (3, 4)]);
        assert!(align_spans(&[], &t).unwrap().is_empty());
        // only whitespace under the span
        assert!(align_spans(&[Span::new(2, 3)], &t).unwrap().is_empty());
    }

    #[test]
    fn reversed_span_is_an_error() {
        let t = tok(&[(0, 2)]);
        let err = align_spans(&[Span::new(2, 1)], &t).unwrap_err();
        assert!(err.to_string().contains("[2,1)"));
    }

    #[test]
    fn overlapping_results_merge() {
        let t = tok(&[(0, 1), (1, 2), (2, 3)]);
        let got = align_spans(&[Span::new(1, 3), Span::new(0, 2)], &t).unwrap();
        assert_eq!(got, vec![Span::new(0, 3)]);
    }

    #[test]
    fn entity_wins_over_splitting_phrase() {
        let tk = tokenizer();
        let text = tk.normalize("harry potter is a series");
        let tokens = tk.tokenize(&text);
        let s = AnnotatedSentence::from_token_spans(
            text,
            tokens,
            vec![Span::new(1, 3), Span::new(3, 5)],
            vec![Span::new(0, 2)],
        )
        .unwrap();
        assert_eq!(s.phrase_spans, vec![Span::new(3, 5)]);
        assert_eq!(s.entity_spans, vec![Span::new(0, 2)]);
    }

    #[test]
    fn dictionary_empty_lexicon() {
        let tk = tokenizer();
        let s = AnnotatedSentence::plain(&tk, "harry potter is a series");
        let (p, e) = dictionary_annotate(&s.text, &s.tokens, &Lexicon::default());
        assert!(p.is_empty() && e.is_empty());
    }

    #[test]
    fn dictionary_finds_entity() {
        let tk = tokenizer();
        let s = AnnotatedSentence::plain(&tk, "Harry Potter is a series");
        let lex = Lexicon::new([("harry potter", SpanKind::Entity)]);
        let (p, e) = dictionary_annotate(&s.text, &s.tokens, &lex);
        assert!(p.is_empty());
        assert_eq!(e, vec![Span::new(0, 2)]);
    }

    #[test]
    fn dictionary_prefers_longest() {
        let tk = tokenizer();
        let s = AnnotatedSentence::plain(&tk, "j . k . rowling");
        let lex = Lexicon::new([
            ("k . rowling", SpanKind::Entity),
            ("j . k . rowling", SpanKind::Entity),
        ]);
        let (_, e) = dictionary_annotate(&s.text, &s.tokens, &lex);
        assert_eq!(e, vec![Span::new(0, 5)]);
    }

    #[test]
    fn lexicon_tsv() {
        let tk = tokenizer();
        let lex = Lexicon::parse("Harry Potter\tentity\nis a\tphrase\n", &tk).unwrap();
        let found = lex.find(&"harry potter is a".chars().collect::<Vec<_>>());
        assert_eq!(
            found,
            vec![
                (Span::new(0, 12), SpanKind::Entity),
                (Span::new(13, 17), SpanKind::Phrase)
            ]
        );
        assert!(Lexicon::parse("x\tthing\n", &tk).is_err());
    }

    #[test]
    fn corpus_zero_lines() {
        let tk = tokenizer();
        assert_eq!(corpus_from_reader("".as_bytes(), &tk).count(), 0);
    }

    #[test]
    fn corpus_entity_field() {
        let tk = tokenizer();
        let src = r#"{"text": "j k", "phrases": [], "entities": [[0, 3]]}"#;
        let s: Vec<_> = corpus_from_reader(src.as_bytes(), &tk)
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens.len(), 2);
        assert_eq!(s[0].entity_spans, vec![Span::new(0, 2)]);
    }

    #[test]
    fn corpus_reversed_span_names_line() {
        let tk = tokenizer();
        let src = "{\"text\": \"harry potter\"}\n\n{\"text\": \"harry potter\", \"entities\": [[5, 4]]}\n";
        let items: Vec<_> = corpus_from_reader(src.as_bytes(), &tk).collect();
        assert!(items[0].is_ok());
        let msg = items[1].as_ref().unwrap_err().to_string();
        assert!(
            msg.contains("reversed span") && msg.contains("line 3"),
            "{msg}"
        );
    }

    #[test]
    fn corpus_malformed_line() {
        let tk = tokenizer();
        let items: Vec<_> = corpus_from_reader("{\"txt\": 1}\n".as_bytes(), &tk).collect();
        assert!(matches!(items[0], Err(AnnotateError::Line { line: 1, .. })));
    }

    #[test]
    fn dialogue_patterns() {
        assert_eq!(pattern_of(&[Role::Q, Role::R]).unwrap(), "QR");
        assert_eq!(pattern_of(&[Role::Q, Role::R, Role::Q]).unwrap(), "QRQ");
        assert!(pattern_of(&[Role::R, Role::Q]).is_err());
    }

    #[test]
    fn dialogue_reader_windows_and_errors() {
        let tk = tokenizer();
        let src = concat!(
            r#"{"turns": [{"role": "Q", "text": "is"}, {"role": "R", "text": "a"}]}"#,
            "\n",
            r#"{"turns": [{"role": "Q", "text": "is"}, {"role": "R", "text": "a"}, {"role": "Q", "text": "j"}, {"role": "R", "text": "k"}]}"#,
            "\n",
            r#"{"turns": [{"role": "X", "text": "is"}, {"role": "R", "text": "a"}]}"#,
            "\n"
        );
        let items: Vec<_> = dialogues_from_reader(src.as_bytes(), &tk).collect();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].as_ref().unwrap().roles(), "QR");
        // QRQR → QRQ window only (RQR is not admitted)
        assert_eq!(items[1].as_ref().unwrap().roles(), "QRQ");
        let msg = items[2].as_ref().unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }
}
