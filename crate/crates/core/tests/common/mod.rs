//! Oracles and synthetic data shared by the property and acceptance tests.
#![allow(dead_code)]

pub mod reference;

use std::collections::{BTreeSet, HashMap};

use kmask_core::annotate::AnnotatedSentence;
use kmask_core::encoder::ModelConfig;
use kmask_core::eval::Tag;
use kmask_core::rng::Rng;
use kmask_core::tensor::Graph;
use kmask_core::textnorm::{Span, Vocabulary, NUM_SPECIALS};
use kmask_core::train::{batch_losses, PreparedBatch};
use kmask_core::Encoder;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use reference::RefModel;

// ---------------------------------------------------------------------------
// Tokenizer oracles

/// Pre-tokenization by definition: ideographs stand alone, whitespace
/// separates, everything else groups into runs. `(text, start, end)` in chars.
pub fn oracle_units(text: &str) -> Vec<(String, usize, usize)> {
    let cjk =
        |c: char| ('\u{4E00}'..='\u{9FFF}').contains(&c) || ('\u{3400}'..='\u{4DBF}').contains(&c);
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if cjk(c) {
            out.push((c.to_string(), i, i + 1));
            i += 1;
        } else {
            let s = i;
            while i < chars.len() && !chars[i].is_whitespace() && !cjk(chars[i]) {
                i += 1;
            }
            out.push((chars[s..i].iter().collect(), s, i));
        }
    }
    out
}

/// Every segmentation of `unit` into vocabulary pieces, by exhaustive search.
pub fn all_segmentations(unit: &[char], vocab: &dyn Fn(&str) -> bool) -> Vec<Vec<String>> {
    fn go(
        unit: &[char],
        at: usize,
        vocab: &dyn Fn(&str) -> bool,
        cur: &mut Vec<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        if at == unit.len() {
            out.push(cur.clone());
            return;
        }
        for end in at + 1..=unit.len() {
            let body: String = unit[at..end].iter().collect();
            let key = if at == 0 { body } else { format!("##{body}") };
            if vocab(&key) {
                cur.push(key);
                go(unit, end, vocab, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(unit, 0, vocab, &mut Vec::new(), &mut out);
    out
}

/// The greedy longest-match segmentation picked out of the exhaustive list:
/// the lexicographically largest vector of piece lengths.
pub fn oracle_wordpiece(unit: &str, vocab: &dyn Fn(&str) -> bool) -> Option<Vec<String>> {
    let chars: Vec<char> = unit.chars().collect();
    let len = |p: &String| p.trim_start_matches("##").chars().count();
    all_segmentations(&chars, vocab).into_iter().max_by(|a, b| {
        let la: Vec<usize> = a.iter().map(len).collect();
        let lb: Vec<usize> = b.iter().map(len).collect();
        la.cmp(&lb)
    })
}

/// Letters and ideographs the generated vocabularies always cover.
pub const LETTERS: &[char] = &['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];
pub const IDEOGRAPHS: &[char] = &[
    '中', '国', '北', '京', '哈', '尔', '滨', '是', '的', '人', '大', '学',
];

/// Every letter as head and continuation, every ideograph, plus random
/// multi-letter pieces.
pub fn oracle_vocab(r: &mut Rng) -> Vocabulary {
    let mut pieces: BTreeSet<String> = BTreeSet::new();
    for &c in LETTERS {
        pieces.insert(c.to_string());
        pieces.insert(format!("##{c}"));
    }
    for &c in IDEOGRAPHS {
        pieces.insert(c.to_string());
    }
    for _ in 0..r.random_range(5..30) {
        let len = r.random_range(2..=4);
        let body: String = (0..len).map(|_| *LETTERS.choose(r).unwrap()).collect();
        pieces.insert(if r.random_bool(0.5) {
            body
        } else {
            format!("##{body}")
        });
    }
    Vocabulary::with_pieces(pieces).unwrap()
}

/// Ideographs and letter runs separated by optional spaces; every unit is
/// covered by [`oracle_vocab`].
pub fn covered_string(r: &mut Rng) -> String {
    let mut s = String::new();
    for _ in 0..r.random_range(1..8) {
        if r.random_bool(0.4) {
            s.push(*IDEOGRAPHS.choose(r).unwrap());
        } else {
            for _ in 0..r.random_range(1..=8) {
                let c = *LETTERS.choose(r).unwrap();
                s.push(if r.random_bool(0.2) {
                    c.to_ascii_uppercase()
                } else {
                    c
                });
            }
        }
        for _ in 0..r.random_range(0..3) {
            s.push(' ');
        }
    }
    s
}

/// A character from a mix of scripts, whitespace and punctuation.
pub fn fuzz_char(r: &mut Rng) -> char {
    let pools: [(u32, u32); 10] = [
        (0x4E00, 0x9FFF),
        (0x3400, 0x4DBF),
        (0x0041, 0x005A),
        (0x0061, 0x007A),
        (0x0030, 0x0039),
        (0xAC00, 0xD7A3),
        (0x3040, 0x30FF),
        (0xFF01, 0xFF5E),
        (0x0300, 0x036F),
        (0x1F600, 0x1F64F),
    ];
    match r.random_range(0..12) {
        10 => *[' ', '\t', '\u{3000}', '\n'].choose(r).unwrap(),
        11 => *['，', '。', '!', '-', '#'].choose(r).unwrap(),
        k => {
            let (lo, hi) = pools[k];
            char::from_u32(r.random_range(lo..=hi)).unwrap()
        }
    }
}

// ---------------------------------------------------------------------------
// Metric oracles

/// Whether `[s, e)` of type `t` is exactly one decoded chunk of `tags`, with
/// a stray `I-` read as the start of a chunk.
fn is_chunk(tags: &[Tag], s: usize, e: usize, t: usize) -> bool {
    let starts = match tags[s] {
        Tag::B(x) => x == t,
        Tag::I(x) => x == t && (s == 0 || !matches!(tags[s - 1], Tag::B(y) | Tag::I(y) if y == t)),
        Tag::O => false,
    };
    starts
        && tags[s + 1..e].iter().all(|&x| x == Tag::I(t))
        && (e == tags.len() || tags[e] != Tag::I(t))
}

/// Every chunk, found by trying all `(start, end, type)` triples.
pub fn brute_chunks(tags: &[Tag], n_types: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for s in 0..tags.len() {
        for e in s + 1..=tags.len() {
            for t in 0..n_types {
                if is_chunk(tags, s, e, t) {
                    out.push((s, e, t));
                }
            }
        }
    }
    out
}

/// `(precision, recall, f1)` by counting matched triples.
pub fn brute_span_f1(pred: &[Vec<Tag>], gold: &[Vec<Tag>], n_types: usize) -> (f64, f64, f64) {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let ps = brute_chunks(p, n_types);
        let gs = brute_chunks(g, n_types);
        tp += ps.iter().filter(|x| gs.contains(x)).count();
        np += ps.len();
        ng += gs.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let f1 = if tp == 0 { 0.0 } else { ratio(2 * tp, np + ng) };
    (ratio(tp, np), ratio(tp, ng), f1)
}

/// Reciprocal rank of each query from its best-ranked relevant item.
pub fn brute_mrr(rankings: &[Vec<bool>]) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in rankings {
        let best = (1..=r.len()).filter(|&k| r[k - 1]).min();
        total += best.map_or(0.0, |k| 1.0 / k as f64);
    }
    total / rankings.len() as f64
}

/// Random tags over `n_types`; with `valid` the sequence is proper BIO.
pub fn random_tags(rng: &mut Rng, n: usize, n_types: usize, valid: bool) -> Vec<Tag> {
    let mut tags: Vec<Tag> = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0..n_types);
        let tag = match rng.random_range(0..3) {
            0 => Tag::O,
            1 => Tag::B(t),
            _ => Tag::I(t),
        };
        let tag = match (valid, tag) {
            (true, Tag::I(_)) => match i.checked_sub(1).map(|j| tags[j]) {
                Some(Tag::B(p) | Tag::I(p)) => Tag::I(p),
                _ => Tag::B(t),
            },
            (_, tag) => tag,
        };
        tags.push(tag);
    }
    tags
}

// ---------------------------------------------------------------------------
// Synthetic corpora

/// A sentence over random non-special ids with non-overlapping phrase and
/// entity spans of length 2..=4 laid out left to right.
pub fn random_annotated(rng: &mut Rng, n: usize, vocab: usize) -> AnnotatedSentence {
    let ids: Vec<u32> = (0..n)
        .map(|_| rng.random_range(NUM_SPECIALS..vocab as u32))
        .collect();
    let (mut phrases, mut entities) = (Vec::new(), Vec::new());
    let mut at = rng.random_range(0..3);
    while at + 2 <= n {
        let len = rng.random_range(2..=4).min(n - at);
        let span = Span::new(at, at + len);
        if rng.random_bool(0.5) {
            entities.push(span);
        } else {
            phrases.push(span);
        }
        at += len + rng.random_range(1..4);
    }
    AnnotatedSentence::from_ids(&ids, phrases, entities).expect("well-formed spans")
}

// ---------------------------------------------------------------------------
// Gradient check

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    pub loss_gap: f64,
}

/// Relative error between `a` and `n`, with differences below `floor`
/// counted as agreement.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= floor {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

/// Compares the tape's gradient of every parameter element with central
/// differences of the f64 reference loss.
pub fn grad_check(enc: &Encoder, batch: &PreparedBatch, step: f64, floor: f64) -> GradCheck {
    let mut g = Graph::new();
    let (total, _, _) = batch_losses(enc, &mut g, batch, None).expect("forward");
    let analytic_loss = g.value(total)[0] as f64;
    let grads = g.backward(total).expect("backward");
    // A tied parameter appears once per use; its gradient is the sum.
    let mut by_id: HashMap<usize, Vec<f32>> = HashMap::new();
    for (id, v) in grads.params() {
        let acc = by_id.entry(id.0).or_insert_with(|| vec![0.0; v.len()]);
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }

    let mut model = RefModel::from_encoder(enc);
    let loss_gap = (model.loss(batch) - analytic_loss).abs();
    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        loss_gap,
    };
    for (id, name, t) in enc.params.iter() {
        let analytic = by_id
            .get(&id.0)
            .cloned()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = model.params[name][i];
            model.params.get_mut(name).unwrap()[i] = x0 + step;
            let up = model.loss(batch);
            model.params.get_mut(name).unwrap()[i] = x0 - step;
            let down = model.loss(batch);
            model.params.get_mut(name).unwrap()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            let r = rel_err(a as f64, numeric, floor);
            if r > out.max_rel {
                out.max_rel = r;
                out.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
            out.checked += 1;
        }
    }
    out
}

/// The small model used for gradient checks, with every parameter drawn
/// away from its initial constant so no gradient is structurally zero.
pub fn gradcheck_model(rng: &mut Rng, tie_mlm: bool) -> Encoder {
    let cfg = ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn_hidden: Some(16),
        max_len: 12,
        vocab_size: 20,
        dropout: 0.0,
        tie_mlm,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    let mut enc = Encoder::new(cfg, rng).expect("valid config");
    for (name, t) in enc.params.tensors_mut() {
        if name.ends_with(".gamma") {
            for x in &mut t.data {
                *x = 1.0 + rng.random_range(-0.3..0.3);
            }
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            for x in &mut t.data {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
    enc
}

/// Shuffled copy of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
