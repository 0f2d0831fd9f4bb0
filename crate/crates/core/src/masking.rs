//! Multi-stage knowledge masking.
//!
//! Basic masking picks single tokens; phrase and entity masking pick whole
//! annotated spans so every piece of a selected unit is hidden together.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::AnnotatedSentence;
use crate::rng::Rng;
use crate::textnorm::{Span, CLS, MASK, NUM_SPECIALS, PAD, SEP};

pub const TYPE_SEGMENT_A: u32 = 0;
pub const TYPE_SEGMENT_B: u32 = 1;
pub const TYPE_ROLE_Q: u32 = 2;
pub const TYPE_ROLE_R: u32 = 3;
pub const TYPE_VOCAB: usize = 4;

pub const DEFAULT_MASK_RATIO: f64 = 0.15;
pub const DEFAULT_REPLACE_PROBS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Error, PartialEq)]
pub enum MaskingError {
    #[error("replacement probabilities {0:?} must be nonnegative and sum to 1")]
    BadProbs([f64; 3]),
    #[error("mask ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("max_len {0} is below the minimum of 4")]
    MaxLenTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Basic,
    Phrase,
    Entity,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Basic, Stage::Phrase, Stage::Entity];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Basic => "basic",
            Stage::Phrase => "phrase",
            Stage::Entity => "entity",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Stage::Basic),
            "phrase" => Ok(Stage::Phrase),
            "entity" => Ok(Stage::Entity),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    Mask,
    Random(u32),
    Keep,
}

/// Masked positions of one sequence with their replacement decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingPlan {
    pub stage: Stage,
    pub mask_positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mask_ratio: f64,
    pub replace_probs: [f64; 3],
    pub max_len: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_ratio: DEFAULT_MASK_RATIO,
            replace_probs: DEFAULT_REPLACE_PROBS,
            max_len: 128,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MaskingError> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(MaskingError::BadRatio(self.mask_ratio));
        }
        check_probs(self.replace_probs)?;
        if self.max_len < 4 {
            return Err(MaskingError::MaxLenTooSmall(self.max_len));
        }
        Ok(())
    }
}

/// One MLM instance, padded to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub mask_positions: Vec<usize>,
    pub labels: Vec<u32>,
    pub max_len: usize,
    pub stage: Stage,
}

impl MaskedExample {
    /// Number of non-PAD positions.
    pub fn seq_len(&self) -> usize {
        self.input_ids.iter().take_while(|&&id| id != PAD).count()
    }
}

/// Token budget for a sentence of `n` maskable tokens.
pub fn mask_budget(n: usize, ratio: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((ratio * n as f64).round() as usize).max(1)
    }
}

fn basic_spans(n: usize, budget: usize, rng: &mut Rng) -> Vec<Span> {
    let mut picked = index::sample(rng, n, budget.min(n)).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| Span::new(i, i + 1)).collect()
}

/// Chooses the token ranges to mask in one sentence.
pub fn select_spans(
    s: &AnnotatedSentence,
    stage: Stage,
    mask_ratio: f64,
    rng: &mut Rng,
) -> Vec<Span> {
    let n = s.len();
    let budget = mask_budget(n, mask_ratio);
    if budget == 0 {
        return Vec::new();
    }
    let candidates = match stage {
        Stage::Basic => &[][..],
        Stage::Phrase => &s.phrase_spans[..],
        Stage::Entity => &s.entity_spans[..],
    };
    if candidates.is_empty() {
        return basic_spans(n, budget, rng);
    }
    let mut shuffled = candidates.to_vec();
    shuffled.shuffle(rng);
    let mut used = 0;
    let mut accepted = Vec::new();
    for span in &shuffled {
        if used + span.len() <= budget {
            used += span.len();
            accepted.push(*span);
        }
    }
    if accepted.is_empty() {
        accepted.push(shuffled[0]);
    }
    accepted.sort();
    accepted
}

fn check_probs(probs: [f64; 3]) -> Result<(), MaskingError> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(MaskingError::BadProbs(probs));
    }
    Ok(())
}

/// Draws MASK / RANDOM / KEEP independently for `count` positions. Random
/// tokens are uniform over non-special ids.
pub fn apply_replacements(
    count: usize,
    rng: &mut Rng,
    probs: [f64; 3],
    vocab_size: usize,
) -> Result<Vec<Replacement>, MaskingError> {
    check_probs(probs)?;
    let pool = vocab_size.saturating_sub(NUM_SPECIALS as usize);
    Ok((0..count)
        .map(|_| {
            let u: f64 = rng.random();
            if u < probs[0] {
                Replacement::Mask
            } else if u < probs[0] + probs[1] {
                if pool == 0 {
                    Replacement::Mask
                } else {
                    Replacement::Random(NUM_SPECIALS + rng.random_range(0..pool as u32))
                }
            } else {
                Replacement::Keep
            }
        })
        .collect())
}

/// Lays out `[CLS] seg1 [SEP] seg2 [SEP] ...`. CLS takes the first segment's
/// type id; each SEP takes its segment's. Returns ids, types and the offset
/// of every segment's first token.
pub fn layout(segments: &[(&[u32], u32)]) -> (Vec<u32>, Vec<u32>, Vec<usize>) {
    let total = 1 + segments.iter().map(|(ids, _)| ids.len() + 1).sum::<usize>();
    let mut ids = Vec::with_capacity(total);
    let mut types = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(segments.len());
    ids.push(CLS);
    types.push(segments.first().map_or(TYPE_SEGMENT_A, |s| s.1));
    for (seg, ty) in segments {
        offsets.push(ids.len());
        ids.extend_from_slice(seg);
        ids.push(SEP);
        types.extend(std::iter::repeat_n(*ty, seg.len() + 1));
    }
    (ids, types, offsets)
}

/// Applies a plan to laid-out ids and pads everything to `max_len`.
pub fn finish_example(
    mut ids: Vec<u32>,
    mut types: Vec<u32>,
    plan: &MaskingPlan,
    max_len: usize,
) -> MaskedExample {
    for (&pos, rep) in plan.mask_positions.iter().zip(&plan.replacements) {
        match rep {
            Replacement::Mask => ids[pos] = MASK,
            Replacement::Random(t) => ids[pos] = *t,
            Replacement::Keep => {}
        }
    }
    let pad_type = types.last().copied().unwrap_or(TYPE_SEGMENT_A);
    ids.resize(max_len, PAD);
    types.resize(max_len, pad_type);
    MaskedExample {
        input_ids: ids,
        type_ids: types,
        position_ids: (0..max_len as u32).collect(),
        mask_positions: plan.mask_positions.clone(),
        labels: plan.labels.clone(),
        max_len,
        stage: plan.stage,
    }
}

/// Builds a plan from selected spans (token indices relative to a segment
/// starting at `offset` in the laid-out sequence).
pub fn plan_from_spans(
    stage: Stage,
    spans: &[(usize, Vec<Span>)],
    ids: &[u32],
    rng: &mut Rng,
    probs: [f64; 3],
    vocab_size: usize,
) -> Result<MaskingPlan, MaskingError> {
    let mut positions: Vec<usize> = spans
        .iter()
        .flat_map(|(offset, ss)| {
            ss.iter()
                .flat_map(move |s| s.range().map(move |i| offset + i))
        })
        .collect();
    positions.sort_unstable();
    positions.dedup();
    let replacements = apply_replacements(positions.len(), rng, probs, vocab_size)?;
    let labels = positions.iter().map(|&p| ids[p]).collect();
    Ok(MaskingPlan {
        stage,
        mask_positions: positions,
        replacements,
        labels,
    })
}

/// Truncates a segment pair to fit `budget` tokens, trimming the longer
/// segment's tail first.
fn truncate_pair(a: &mut AnnotatedSentence, b: Option<&mut AnnotatedSentence>, budget: usize) {
    match b {
        None => a.truncate(budget),
        Some(b) => {
            let (mut la, mut lb) = (a.len(), b.len());
            while la + lb > budget {
                if la > lb {
                    la -= 1;
                } else {
                    lb -= 1;
                }
            }
            a.truncate(la);
            b.truncate(lb);
        }
    }
}

/// `[CLS] A [SEP] (B [SEP])` with stage-specific masking planned per segment.
pub fn build_mlm_example(
    a: &AnnotatedSentence,
    b: Option<&AnnotatedSentence>,
    stage: Stage,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<MaskedExample, MaskingError> {
    cfg.validate()?;
    let specials = if b.is_some() { 3 } else { 2 };
    let mut a = a.clone();
    let mut b = b.cloned();
    truncate_pair(&mut a, b.as_mut(), cfg.max_len - specials);

    let a_ids = a.ids();
    let b_ids = b.as_ref().map(|b| b.ids());
    let mut segments: Vec<(&[u32], u32)> = vec![(&a_ids, TYPE_SEGMENT_A)];
    if let Some(ids) = &b_ids {
        segments.push((ids, TYPE_SEGMENT_B));
    }
    let (ids, types, offsets) = layout(&segments);

    let mut spans = vec![(offsets[0], select_spans(&a, stage, cfg.mask_ratio, rng))];
    if let Some(b) = &b {
        spans.push((offsets[1], select_spans(b, stage, cfg.mask_ratio, rng)));
    }
    let plan = plan_from_spans(stage, &spans, &ids, rng, cfg.replace_probs, vocab_size)?;
    Ok(finish_example(ids, types, &plan, cfg.max_len))
}
