//! Cloze entity ranking and the fine-tuning harness.

mod metrics;

use std::collections::HashSet;
use std::io::BufRead;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    accuracy, binary_f1, decode_bio, encode_bio, mrr, span_f1, SpanF1, Tag, TypedSpan,
};

use crate::annotate::{align_spans, AnnotateError, AnnotatedSentence, JsonLines};
use crate::encoder::{Batch, Encoder, EncoderError, HeadKind};
use crate::masking::{TYPE_SEGMENT_A, TYPE_SEGMENT_B};
use crate::rng::{substream, Stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, TensorError};
use crate::textnorm::{Span, Tokenizer, CLS, MASK, PAD, SEP};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record {index}: {reason}")]
    Data { index: usize, reason: String },
    #[error("task spec: {0}")]
    Spec(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
}

fn data_err(index: usize, reason: impl Into<String>) -> EvalError {
    EvalError::Data {
        index,
        reason: reason.into(),
    }
}

/// One line of a cloze file. `span` is a character range of `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeRecord {
    pub text: String,
    pub span: Span,
    pub candidates: Vec<String>,
    pub gold: usize,
}

/// A context with one designated entity slot and candidate fillers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClozeItem {
    pub context: AnnotatedSentence,
    /// Token range of the slot in `context`.
    pub span: Span,
    pub candidates: Vec<String>,
    pub candidate_ids: Vec<Vec<u32>>,
    pub gold: usize,
}

impl ClozeItem {
    pub fn new(
        context: AnnotatedSentence,
        span: Span,
        candidates: Vec<(String, Vec<u32>)>,
        gold: usize,
    ) -> Result<Self, EvalError> {
        if span.is_empty() || span.end > context.len() {
            return Err(data_err(
                0,
                format!("slot {span} outside {} tokens", context.len()),
            ));
        }
        if candidates.is_empty() {
            return Err(data_err(0, "no candidates"));
        }
        if gold >= candidates.len() {
            return Err(data_err(
                0,
                format!("gold {gold} out of {} candidates", candidates.len()),
            ));
        }
        let mut seen = HashSet::new();
        for (text, ids) in &candidates {
            if !seen.insert(text.as_str()) {
                return Err(data_err(0, format!("duplicate candidate {text:?}")));
            }
            if ids.is_empty() {
                return Err(data_err(0, format!("candidate {text:?} has no tokens")));
            }
        }
        let (candidates, candidate_ids) = candidates.into_iter().unzip();
        Ok(ClozeItem {
            context,
            span,
            candidates,
            candidate_ids,
            gold,
        })
    }

    pub fn from_record(rec: &ClozeRecord, tokenizer: &Tokenizer) -> Result<Self, EvalError> {
        let context = AnnotatedSentence::plain(tokenizer, &rec.text);
        let n = context.text.char_len();
        if rec.span.is_empty() || rec.span.end > n {
            return Err(data_err(
                0,
                format!("span {} outside text of {n} characters", rec.span),
            ));
        }
        let span = align_spans(&[rec.span], &context.tokens)?
            .first()
            .copied()
            .ok_or_else(|| data_err(0, format!("span {} covers no token", rec.span)))?;
        let cands = rec
            .candidates
            .iter()
            .map(|c| (c.clone(), tokenizer.encode(c)))
            .collect();
        Self::new(context, span, cands, rec.gold)
    }

    /// `[CLS] prefix [MASK]×k suffix [SEP]` and the masked positions.
    fn filled(&self, k: usize) -> (Vec<u32>, Vec<usize>) {
        let ids = self.context.ids();
        let mut seq = vec![CLS];
        seq.extend_from_slice(&ids[..self.span.start]);
        let first = seq.len();
        seq.extend(std::iter::repeat_n(MASK, k));
        seq.extend_from_slice(&ids[self.span.end..]);
        seq.push(SEP);
        (seq, (first..first + k).collect())
    }
}

/// Reads a cloze JSONL file; errors carry the line number.
pub fn read_cloze<R: BufRead>(
    reader: R,
    tokenizer: &Tokenizer,
) -> Result<Vec<ClozeItem>, EvalError> {
    let mut lines = JsonLines::new(reader);
    let mut out = Vec::new();
    while let Some(rec) = lines.next_record::<ClozeRecord>() {
        let (line, rec) = rec?;
        out.push(
            ClozeItem::from_record(&rec, tokenizer).map_err(|e| match e {
                EvalError::Data { reason, .. } => data_err(line, reason),
                other => other,
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCandidate {
    pub index: usize,
    pub text: String,
    /// Mean log-probability of the candidate's tokens; `-inf` if it does not fit.
    pub score: f64,
}

fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row
        .iter()
        .map(|&x| (x as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row[target] as f64 - lse
}

/// Mean log-probability of `ids` filling the slot, all masked at once.
pub fn candidate_score(encoder: &Encoder, item: &ClozeItem, ids: &[u32]) -> Result<f64, EvalError> {
    let (seq, positions) = item.filled(ids.len());
    if seq.len() > encoder.config.max_len {
        return Ok(f64::NEG_INFINITY);
    }
    let n = seq.len();
    let batch = Batch::single(seq, vec![TYPE_SEGMENT_A; n], (0..n as u32).collect());
    let mut g = Graph::new();
    let h = encoder.forward(&mut g, &batch, None)?;
    let hm = g.gather_rows(h, &positions)?;
    let logits = encoder.mlm_logits(&mut g, hm)?;
    let v = encoder.config.vocab_size;
    let values = g.value(logits);
    let total: f64 = ids
        .iter()
        .enumerate()
        .map(|(r, &t)| log_softmax_at(&values[r * v..(r + 1) * v], t as usize))
        .sum();
    Ok(total / ids.len() as f64)
}

/// Ranks the candidates by score, highest first; ties go to the
/// lexicographically smaller candidate.
pub fn cloze_score(encoder: &Encoder, item: &ClozeItem) -> Result<Vec<RankedCandidate>, EvalError> {
    let mut out = Vec::with_capacity(item.candidates.len());
    for (i, (text, ids)) in item.candidates.iter().zip(&item.candidate_ids).enumerate() {
        let score = candidate_score(encoder, item, ids)?;
        if score == f64::NEG_INFINITY {
            log::warn!(
                "cloze candidate {text:?} does not fit in max_len {}",
                encoder.config.max_len
            );
        }
        out.push(RankedCandidate {
            index: i,
            text: text.clone(),
            score,
        });
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.text.cmp(&b.text))
    });
    Ok(out)
}

/// Negative mean log-probability of the gold filler.
pub fn cloze_gold_loss(encoder: &Encoder, item: &ClozeItem) -> Result<f64, EvalError> {
    Ok(-candidate_score(
        encoder,
        item,
        &item.candidate_ids[item.gold],
    )?)
}

/// Fraction of items whose gold candidate ranks first.
pub fn cloze_accuracy(encoder: &Encoder, items: &[ClozeItem]) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for item in items {
        if cloze_score(encoder, item)?[0].index == item.gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SequenceClassification,
    TokenTagging,
    PairwiseRanking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    SpanF1,
    MrrF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Classes for sequence classification.
    #[serde(default)]
    pub n_classes: usize,
    /// Entity types for tagging; tags are BIO over these.
    #[serde(default)]
    pub tag_types: Vec<String>,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn classification(n_classes: usize) -> Self {
        TaskSpec {
            kind: TaskKind::SequenceClassification,
            n_classes,
            tag_types: Vec::new(),
            metric: Metric::Accuracy,
        }
    }

    pub fn tagging<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Self {
        TaskSpec {
            kind: TaskKind::TokenTagging,
            n_classes: 0,
            tag_types: types.into_iter().map(Into::into).collect(),
            metric: Metric::SpanF1,
        }
    }

    pub fn ranking() -> Self {
        TaskSpec {
            kind: TaskKind::PairwiseRanking,
            n_classes: 2,
            tag_types: Vec::new(),
            metric: Metric::MrrF1,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let want = match self.kind {
            TaskKind::SequenceClassification => Metric::Accuracy,
            TaskKind::TokenTagging => Metric::SpanF1,
            TaskKind::PairwiseRanking => Metric::MrrF1,
        };
        if self.metric != want {
            return Err(EvalError::Spec(format!(
                "metric {:?} does not fit task {:?}",
                self.metric, self.kind
            )));
        }
        match self.kind {
            TaskKind::SequenceClassification if self.n_classes < 2 => Err(EvalError::Spec(
                "classification needs at least 2 classes".into(),
            )),
            TaskKind::TokenTagging if self.tag_types.is_empty() => Err(EvalError::Spec(
                "tagging needs at least one entity type".into(),
            )),
            _ => Ok(()),
        }
    }

    fn head(&self) -> (HeadKind, usize) {
        match self.kind {
            TaskKind::SequenceClassification => (HeadKind::SequenceClassification, self.n_classes),
            TaskKind::PairwiseRanking => (HeadKind::SequenceClassification, 2),
            TaskKind::TokenTagging => (
                HeadKind::TokenTagging,
                Tag::num_classes(self.tag_types.len()),
            ),
        }
    }
}

/// `{"text": str, "text_b": str?, "label": int}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClsRecord {
    pub text: String,
    #[serde(default)]
    pub text_b: Option<String>,
    pub label: usize,
}

/// `{"text": str, "entities": [[c0, c1, "TYPE"], ...]}` with character offsets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagRecord {
    pub text: String,
    #[serde(default)]
    pub entities: Vec<(usize, usize, String)>,
}

/// `{"query": str, "candidates": [str, ...], "labels": [0|1, ...]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankRecord {
    pub query: String,
    pub candidates: Vec<String>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsExample {
    pub a: Vec<u32>,
    pub b: Option<Vec<u32>>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagExample {
    pub ids: Vec<u32>,
    pub tags: Vec<Tag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankQuery {
    pub query: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub relevant: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    Cls(Vec<ClsExample>),
    Tag(Vec<TagExample>),
    Rank(Vec<RankQuery>),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Cls(v) => v.len(),
            TaskData::Tag(v) => v.len(),
            TaskData::Rank(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks labels against the spec; errors name the record index.
    pub fn check(&self, spec: &TaskSpec) -> Result<(), EvalError> {
        match (self, spec.kind) {
            (TaskData::Cls(v), TaskKind::SequenceClassification) => {
                for (i, e) in v.iter().enumerate() {
                    if e.label >= spec.n_classes {
                        return Err(data_err(
                            i,
                            format!("label {} outside 0..{}", e.label, spec.n_classes),
                        ));
                    }
                }
            }
            (TaskData::Tag(v), TaskKind::TokenTagging) => {
                let nt = spec.tag_types.len();
                for (i, e) in v.iter().enumerate() {
                    if e.tags.len() != e.ids.len() {
                        return Err(data_err(i, "tag count differs from token count"));
                    }
                    let bad = e
                        .tags
                        .iter()
                        .any(|t| matches!(t, Tag::B(k) | Tag::I(k) if *k >= nt));
                    if bad {
                        return Err(data_err(i, "entity type outside the tag set"));
                    }
                    if decode_bio(&e.tags).1 > 0 {
                        return Err(data_err(i, "tags are not valid BIO"));
                    }
                }
            }
            (TaskData::Rank(v), TaskKind::PairwiseRanking) => {
                for (i, q) in v.iter().enumerate() {
                    if q.candidates.is_empty() || q.candidates.len() != q.relevant.len() {
                        return Err(data_err(
                            i,
                            "candidates and labels must be non-empty and aligned",
                        ));
                    }
                }
            }
            (_, kind) => {
                return Err(EvalError::Spec(format!(
                    "data does not match task {kind:?}"
                )))
            }
        }
        Ok(())
    }

    /// Reads JSONL for `spec.kind`; errors carry the line number.
    pub fn read<R: BufRead>(
        reader: R,
        spec: &TaskSpec,
        tokenizer: &Tokenizer,
    ) -> Result<Self, EvalError> {
        let mut lines = JsonLines::new(reader);
        let data = match spec.kind {
            TaskKind::SequenceClassification => {
                let mut v = Vec::new();
                while let Some(r) = lines.next_record::<ClsRecord>() {
                    let (line, r) = r?;
                    if r.label >= spec.n_classes {
                        return Err(data_err(
                            line,
                            format!("label {} outside 0..{}", r.label, spec.n_classes),
                        ));
                    }
                    v.push(ClsExample {
                        a: tokenizer.encode(&r.text),
                        b: r.text_b.as_deref().map(|t| tokenizer.encode(t)),
                        label: r.label,
                    });
                }
                TaskData::Cls(v)
            }
            TaskKind::TokenTagging => {
                let mut v = Vec::new();
                while let Some(r) = lines.next_record::<TagRecord>() {
                    let (line, r) = r?;
                    let text = tokenizer.normalize(&r.text);
                    let tokens = tokenizer.tokenize(&text);
                    let mut spans = Vec::new();
                    for (c0, c1, ty) in &r.entities {
                        let t = spec.tag_types.iter().position(|x| x == ty).ok_or_else(|| {
                            data_err(line, format!("entity type {ty:?} not in tag set"))
                        })?;
                        let cs = Span::new(*c0, *c1);
                        if cs.is_empty() || cs.end > text.char_len() {
                            return Err(data_err(line, format!("entity {cs} outside text")));
                        }
                        if let Some(ts) = align_spans(&[cs], &tokens)?.first() {
                            spans.push((ts.start, ts.end, t));
                        }
                    }
                    spans.sort();
                    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
                        return Err(data_err(line, "overlapping entities"));
                    }
                    v.push(TagExample {
                        tags: encode_bio(tokens.len(), &spans),
                        ids: tokens.iter().map(|t| t.id).collect(),
                    });
                }
                TaskData::Tag(v)
            }
            TaskKind::PairwiseRanking => {
                let mut v = Vec::new();
                while let Some(r) = lines.next_record::<RankRecord>() {
                    let (line, r) = r?;
                    if r.candidates.is_empty() || r.candidates.len() != r.labels.len() {
                        return Err(data_err(
                            line,
                            "candidates and labels must be non-empty and aligned",
                        ));
                    }
                    if let Some(l) = r.labels.iter().find(|&&l| l > 1) {
                        return Err(data_err(line, format!("label {l} is not 0 or 1")));
                    }
                    v.push(RankQuery {
                        query: tokenizer.encode(&r.query),
                        candidates: r.candidates.iter().map(|c| tokenizer.encode(c)).collect(),
                        relevant: r.labels.iter().map(|&l| l == 1).collect(),
                    });
                }
                TaskData::Rank(v)
            }
        };
        Ok(data)
    }
}

#[derive(Debug, Clone)]
enum Target {
    Class(usize),
    /// Tag class per laid-out position; -1 where ignored.
    Tags(Vec<i64>),
}

#[derive(Debug, Clone)]
struct Instance {
    ids: Vec<u32>,
    types: Vec<u32>,
    target: Target,
}

fn pair_instance(a: &[u32], b: Option<&[u32]>, max_len: usize, target: Target) -> Instance {
    let (mut la, mut lb) = (a.len(), b.map_or(0, <[u32]>::len));
    let budget = max_len - if b.is_some() { 3 } else { 2 };
    while la + lb > budget {
        if la > lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut ids = vec![CLS];
    ids.extend_from_slice(&a[..la]);
    ids.push(SEP);
    let mut types = vec![TYPE_SEGMENT_A; ids.len()];
    if let Some(b) = b {
        ids.extend_from_slice(&b[..lb]);
        ids.push(SEP);
        types.resize(ids.len(), TYPE_SEGMENT_B);
    }
    Instance { ids, types, target }
}

fn instances(data: &TaskData, max_len: usize) -> Vec<Instance> {
    match data {
        TaskData::Cls(v) => v
            .iter()
            .map(|e| pair_instance(&e.a, e.b.as_deref(), max_len, Target::Class(e.label)))
            .collect(),
        TaskData::Tag(v) => v
            .iter()
            .map(|e| {
                let n = e.ids.len().min(max_len - 2);
                let mut inst = pair_instance(&e.ids[..n], None, max_len, Target::Class(0));
                let mut t = vec![-1i64];
                t.extend(e.tags[..n].iter().map(|t| t.index() as i64));
                t.push(-1);
                inst.target = Target::Tags(t);
                inst
            })
            .collect(),
        TaskData::Rank(v) => v
            .iter()
            .flat_map(|q| {
                q.candidates.iter().zip(&q.relevant).map(|(c, &r)| {
                    pair_instance(&q.query, Some(c), max_len, Target::Class(r as usize))
                })
            })
            .collect(),
    }
}

fn make_batch(items: &[&Instance]) -> Batch {
    let len = items.iter().map(|i| i.ids.len()).max().unwrap_or(1);
    let mut b = Batch {
        size: items.len(),
        len,
        input_ids: Vec::with_capacity(items.len() * len),
        type_ids: Vec::with_capacity(items.len() * len),
        position_ids: Vec::with_capacity(items.len() * len),
    };
    for it in items {
        let pad = len - it.ids.len();
        b.input_ids.extend_from_slice(&it.ids);
        b.input_ids.extend(std::iter::repeat_n(PAD, pad));
        b.type_ids.extend_from_slice(&it.types);
        b.type_ids.extend(std::iter::repeat_n(TYPE_SEGMENT_A, pad));
        b.position_ids.extend(0..len as u32);
    }
    b
}

fn targets(items: &[&Instance], len: usize) -> Vec<i64> {
    let mut out = Vec::new();
    for it in items {
        match &it.target {
            Target::Class(c) => out.push(*c as i64),
            Target::Tags(t) => {
                out.extend_from_slice(t);
                out.extend(std::iter::repeat_n(-1, len - t.len()));
            }
        }
    }
    out
}

/// Head logits for every instance: one row per sequence, or one row per
/// laid-out position for tagging (trimmed to the instance length).
fn predict(
    encoder: &Encoder,
    insts: &[Instance],
    batch_size: usize,
) -> Result<Vec<Vec<Vec<f32>>>, EvalError> {
    let n_out = encoder
        .head()
        .ok_or_else(|| EvalError::Spec("encoder has no task head".into()))?
        .n_out;
    let mut out = Vec::with_capacity(insts.len());
    for chunk in insts.chunks(batch_size.max(1)) {
        let refs: Vec<&Instance> = chunk.iter().collect();
        let batch = make_batch(&refs);
        let mut g = Graph::new();
        let h = encoder.forward(&mut g, &batch, None)?;
        let logits = encoder.task_logits(&mut g, h, &batch)?;
        let v = g.value(logits);
        let per_seq = v.len() / chunk.len();
        for (k, inst) in chunk.iter().enumerate() {
            let rows = &v[k * per_seq..(k + 1) * per_seq];
            let keep = match inst.target {
                Target::Class(_) => 1,
                Target::Tags(_) => inst.ids.len(),
            };
            out.push(rows.chunks(n_out).take(keep).map(<[f32]>::to_vec).collect());
        }
    }
    Ok(out)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Dev metrics for one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValues {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span_f1: Option<SpanF1>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    /// Positive-class F1 for ranking.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl MetricValues {
    /// The value used to pick the best epoch.
    pub fn primary(&self) -> f64 {
        self.accuracy
            .or(self.span_f1.map(|s| s.f1))
            .or(self.mrr)
            .unwrap_or(0.0)
    }
}

/// Scores `data` with the attached head.
pub fn evaluate(
    encoder: &Encoder,
    spec: &TaskSpec,
    data: &TaskData,
) -> Result<MetricValues, EvalError> {
    data.check(spec)?;
    let insts = instances(data, encoder.config.max_len);
    let preds = predict(encoder, &insts, 32)?;
    let mut m = MetricValues {
        accuracy: None,
        span_f1: None,
        mrr: None,
        f1: None,
    };
    match data {
        TaskData::Cls(v) => {
            let p: Vec<usize> = preds.iter().map(|r| argmax(&r[0])).collect();
            let g: Vec<usize> = v.iter().map(|e| e.label).collect();
            m.accuracy = Some(accuracy(&p, &g));
        }
        TaskData::Tag(v) => {
            let mut pt = Vec::new();
            let mut gt = Vec::new();
            for (e, rows) in v.iter().zip(&preds) {
                let n = rows.len() - 2;
                pt.push(
                    rows[1..1 + n]
                        .iter()
                        .map(|r| Tag::from_index(argmax(r)))
                        .collect(),
                );
                gt.push(e.tags[..n].to_vec());
            }
            m.span_f1 = Some(span_f1(&pt, &gt)?);
        }
        TaskData::Rank(v) => {
            let mut k = 0;
            let mut rankings = Vec::new();
            let (mut pred_pos, mut gold_pos) = (Vec::new(), Vec::new());
            for q in v {
                let scores: Vec<f32> = preds[k..k + q.candidates.len()]
                    .iter()
                    .map(|r| r[0][1] - r[0][0])
                    .collect();
                k += q.candidates.len();
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                rankings.push(order.iter().map(|&i| q.relevant[i]).collect());
                pred_pos.extend(scores.iter().map(|&s| s > 0.0));
                gold_pos.extend_from_slice(&q.relevant);
            }
            m.mrr = Some(mrr(&rankings));
            m.f1 = Some(binary_f1(&pred_pos, &gold_pos));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            batch_size: 16,
            lr: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub task: TaskKind,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best: f64,
}

impl FinetuneReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,accuracy,span_f1,mrr,f1";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                opt(e.dev.accuracy),
                opt(e.dev.span_f1.map(|f| f.f1)),
                opt(e.dev.mrr),
                opt(e.dev.f1)
            ));
        }
        s
    }
}

/// Attaches the head for `spec`, trains every parameter on `train` and
/// evaluates `dev` after each epoch.
pub fn finetune(
    encoder: &mut Encoder,
    spec: &TaskSpec,
    train: &TaskData,
    dev: &TaskData,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport, EvalError> {
    spec.validate()?;
    train.check(spec)?;
    dev.check(spec)?;
    if train.is_empty() {
        return Err(data_err(0, "empty training set"));
    }
    let (kind, n_out) = spec.head();
    encoder.attach_head(kind, n_out, &mut substream(cfg.seed, Stream::Init, 1))?;
    let insts = instances(train, encoder.config.max_len);
    let mut adam = AdamState::new(&encoder.params);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..insts.len()).collect();
        order.shuffle(&mut substream(cfg.seed, Stream::Batch, epoch as u64));
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&Instance> = chunk.iter().map(|&i| &insts[i]).collect();
            let batch = make_batch(&refs);
            let tg = targets(&refs, batch.len);
            let mut drop = substream(cfg.seed, Stream::Dropout, step);
            let grads = {
                let mut g = Graph::new();
                let h = encoder.forward(&mut g, &batch, Some(&mut drop))?;
                let logits = encoder.task_logits(&mut g, h, &batch)?;
                let loss = g.cross_entropy(logits, &tg, -1)?;
                total += g.value(loss)[0] as f64;
                g.backward(loss)?
            };
            encoder.params.zero_grads();
            encoder.params.accumulate(&grads);
            adam_step(&mut encoder.params, &mut adam, &adam_cfg, cfg.lr, true)?;
            batches += 1;
            step += 1;
        }
        let dev_m = evaluate(encoder, spec, dev)?;
        epochs.push(EpochReport {
            epoch: epoch + 1,
            train_loss: total / batches.max(1) as f64,
            dev: dev_m,
        });
    }
    let (best_epoch, best) =
        epochs
            .iter()
            .map(|e| (e.epoch, e.dev.primary()))
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            );
    Ok(FinetuneReport {
        task: spec.kind,
        epochs,
        best_epoch,
        best,
    })
}
