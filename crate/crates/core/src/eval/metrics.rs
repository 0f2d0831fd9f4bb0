//! Accuracy, BIO span F1, binary F1 and mean reciprocal rank.

use serde::Serialize;

use super::EvalError;

/// A BIO tag over entity types `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(usize),
    I(usize),
}

impl Tag {
    /// Class index in the layout `O, B-0, I-0, B-1, I-1, ...`.
    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(t) => 1 + 2 * t,
            Tag::I(t) => 2 + 2 * t,
        }
    }

    pub fn from_index(i: usize) -> Tag {
        match i {
            0 => Tag::O,
            i if i % 2 == 1 => Tag::B((i - 1) / 2),
            i => Tag::I((i - 2) / 2),
        }
    }

    pub fn num_classes(n_types: usize) -> usize {
        1 + 2 * n_types
    }
}

/// A decoded entity: token range and type.
pub type TypedSpan = (usize, usize, usize);

/// Decodes spans, treating an `I-` that does not continue a same-type span
/// as `B-`. Returns the spans and the number of such repairs.
pub fn decode_bio(tags: &[Tag]) -> (Vec<TypedSpan>, usize) {
    let mut spans = Vec::new();
    let mut repairs = 0;
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::O => {
                if let Some((s, ty)) = open.take() {
                    spans.push((s, i, ty));
                }
            }
            Tag::B(ty) => {
                if let Some((s, pty)) = open.take() {
                    spans.push((s, i, pty));
                }
                open = Some((i, ty));
            }
            Tag::I(ty) => match open {
                Some((_, pty)) if pty == ty => {}
                _ => {
                    repairs += 1;
                    if let Some((s, pty)) = open.take() {
                        spans.push((s, i, pty));
                    }
                    open = Some((i, ty));
                }
            },
        }
    }
    if let Some((s, ty)) = open {
        spans.push((s, tags.len(), ty));
    }
    (spans, repairs)
}

/// Tags for non-overlapping typed spans over `n` tokens.
pub fn encode_bio(n: usize, spans: &[TypedSpan]) -> Vec<Tag> {
    let mut tags = vec![Tag::O; n];
    for &(s, e, ty) in spans {
        for (k, t) in tags[s..e].iter_mut().enumerate() {
            *t = if k == 0 { Tag::B(ty) } else { Tag::I(ty) };
        }
    }
    tags
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpanF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold contains no spans; `f1` is reported as 0.
    pub undefined: bool,
    /// Stray `I-` tags in predictions read as `B-`.
    pub repairs: usize,
}

/// Exact-match span F1 pooled over sentences.
pub fn span_f1(pred: &[Vec<Tag>], gold: &[Vec<Tag>]) -> Result<SpanF1, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Metric(format!(
            "{} predicted sequences for {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut np, mut ng, mut repairs) = (0usize, 0usize, 0usize, 0usize);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::Metric(format!(
                "sequence {i}: {} predicted tags for {} gold",
                p.len(),
                g.len()
            )));
        }
        let (gs, gold_repairs) = decode_bio(g);
        if gold_repairs > 0 {
            return Err(EvalError::Metric(format!(
                "sequence {i}: gold tags are not valid BIO"
            )));
        }
        let (ps, r) = decode_bio(p);
        repairs += r;
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        np += ps.len();
        ng += gs.len();
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (np + ng) as f64
    };
    Ok(SpanF1 {
        precision,
        recall,
        f1,
        undefined: ng == 0,
        repairs,
    })
}

/// Mean over queries of `1 / rank` of the first relevant item; each ranking
/// lists relevance in ranked order. Queries without a relevant item score 0.
pub fn mrr(rankings: &[Vec<bool>]) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let total: f64 = rankings
        .iter()
        .map(|r| {
            r.iter()
                .position(|&x| x)
                .map_or(0.0, |k| 1.0 / (k + 1) as f64)
        })
        .sum();
    total / rankings.len() as f64
}

/// F1 of the positive class.
pub fn binary_f1(pred: &[bool], gold: &[bool]) -> f64 {
    let tp = pred.iter().zip(gold).filter(|(p, g)| **p && **g).count();
    let np = pred.iter().filter(|p| **p).count();
    let ng = gold.iter().filter(|g| **g).count();
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (np + ng) as f64
    }
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_single_span() {
        let g = vec![vec![Tag::O, Tag::B(0), Tag::I(0), Tag::O]];
        let r = span_f1(&g, &g).unwrap();
        assert_eq!(r.f1, 1.0);
        assert!(!r.undefined);
    }

    #[test]
    fn shifted_span_scores_zero() {
        let g = vec![vec![Tag::O, Tag::B(0), Tag::I(0), Tag::O]];
        let p = vec![vec![Tag::O, Tag::O, Tag::B(0), Tag::I(0)]];
        assert_eq!(span_f1(&p, &g).unwrap().f1, 0.0);
    }

    #[test]
    fn all_o_gold_is_flagged() {
        let g = vec![vec![Tag::O; 5]];
        let r = span_f1(&g, &g).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(r.undefined);
    }

    #[test]
    fn stray_inside_counts_as_begin() {
        let g = vec![vec![Tag::B(1), Tag::I(1), Tag::O]];
        let p = vec![vec![Tag::I(1), Tag::I(1), Tag::O]];
        let r = span_f1(&p, &g).unwrap();
        assert_eq!(r.repairs, 1);
        assert_eq!(r.f1, 1.0);
        let p = vec![vec![Tag::B(0), Tag::I(1), Tag::O]];
        let r = span_f1(&p, &g).unwrap();
        assert_eq!(r.repairs, 1);
        assert_eq!(r.f1, 0.0);
        assert!(span_f1(&g, &p).is_err());
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[vec![true, false], vec![false, true]]), 0.75);
        assert_eq!(mrr(&[vec![true], vec![true, false, false]]), 1.0);
        assert_eq!(mrr(&[vec![false, false]]), 0.0);
    }

    #[test]
    fn tag_index_round_trip() {
        for i in 0..Tag::num_classes(4) {
            assert_eq!(Tag::from_index(i).index(), i);
        }
        let spans = vec![(0, 2, 1), (3, 4, 0)];
        assert_eq!(decode_bio(&encode_bio(5, &spans)), (spans, 0));
    }

    #[test]
    fn binary_f1_counts_positive_class() {
        assert_eq!(binary_f1(&[true, false, true], &[true, true, false]), 0.5);
        assert_eq!(binary_f1(&[false], &[false]), 0.0);
    }
}
