//! Dialogue language model examples: role-typed multi-turn layout, masked
//! tokens over all turns, and real/fake thread labels.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{AnnotateError, AnnotatedSentence, DialogueThread, Role};
use crate::masking::{
    apply_replacements, finish_example, layout, mask_budget, MaskedExample, MaskingError,
    MaskingPlan, Stage, DEFAULT_MASK_RATIO, DEFAULT_REPLACE_PROBS, TYPE_ROLE_Q, TYPE_ROLE_R,
};
use crate::rng::Rng;

pub const DEFAULT_FAKE_PROB: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error(transparent)]
    Thread(#[from] AnnotateError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error("sentence pool has no sentence different from the replaced turn")]
    PoolExhausted,
    #[error("fake probability {0} outside [0, 1]")]
    BadFakeProb(f64),
    #[error("max_len {max_len} cannot hold {turns} turns")]
    TooShort { max_len: usize, turns: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlmConfig {
    pub mask_ratio: f64,
    pub replace_probs: [f64; 3],
    pub max_len: usize,
    pub fake_prob: f64,
}

impl Default for DlmConfig {
    fn default() -> Self {
        DlmConfig {
            mask_ratio: DEFAULT_MASK_RATIO,
            replace_probs: DEFAULT_REPLACE_PROBS,
            max_len: 128,
            fake_prob: DEFAULT_FAKE_PROB,
        }
    }
}

/// An MLM example plus per-token roles and the real/fake label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlmExample {
    #[serde(flatten)]
    pub example: MaskedExample,
    /// 0 for Q, 1 for R.
    pub role_ids: Vec<u32>,
    pub is_real: bool,
    /// Index of the substituted turn in a fake thread.
    pub replaced_turn: Option<usize>,
    pub pattern: String,
}

pub fn role_type(role: Role) -> u32 {
    match role {
        Role::Q => TYPE_ROLE_Q,
        Role::R => TYPE_ROLE_R,
    }
}

/// Sentences that may stand in for a turn of a fake thread.
#[derive(Debug, Clone, Default)]
pub struct SentencePool {
    sentences: Vec<AnnotatedSentence>,
}

impl SentencePool {
    pub fn new(sentences: Vec<AnnotatedSentence>) -> Self {
        SentencePool { sentences }
    }

    /// Every turn of every thread.
    pub fn from_threads<'a, I: IntoIterator<Item = &'a DialogueThread>>(threads: I) -> Self {
        SentencePool::new(
            threads
                .into_iter()
                .flat_map(|t| t.turns.iter().map(|(_, s)| s.clone()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// A uniformly drawn sentence whose tokens differ from `exclude`.
    pub fn sample_excluding(
        &self,
        rng: &mut Rng,
        exclude: &[u32],
    ) -> Result<&AnnotatedSentence, DialogueError> {
        if self.sentences.is_empty() {
            return Err(DialogueError::PoolExhausted);
        }
        let differs = |s: &AnnotatedSentence| s.tokens.len() != exclude.len() || s.ids() != exclude;
        for _ in 0..32 {
            let s = &self.sentences[rng.random_range(0..self.sentences.len())];
            if differs(s) {
                return Ok(s);
            }
        }
        let start = rng.random_range(0..self.sentences.len());
        (0..self.sentences.len())
            .map(|k| &self.sentences[(start + k) % self.sentences.len()])
            .find(|s| differs(s))
            .ok_or(DialogueError::PoolExhausted)
    }
}

/// Trims the longest turn's tail until all turns fit in `room` tokens.
fn fit_turns(turns: &mut [AnnotatedSentence], room: usize) {
    let mut lens: Vec<usize> = turns.iter().map(AnnotatedSentence::len).collect();
    while lens.iter().sum::<usize>() > room {
        let (longest, _) = lens
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        lens[longest] -= 1;
    }
    for (t, n) in turns.iter_mut().zip(lens) {
        t.truncate(n);
    }
}

/// `[CLS] t1 [SEP] t2 [SEP] (t3 [SEP])` with role type ids.
pub fn dlm_layout(turns: &[(Role, Vec<u32>)]) -> (Vec<u32>, Vec<u32>, Vec<usize>) {
    let segs: Vec<(&[u32], u32)> = turns
        .iter()
        .map(|(r, ids)| (&ids[..], role_type(*r)))
        .collect();
    layout(&segs)
}

/// Builds one DLM example. With probability `fake_prob` one uniformly chosen
/// turn is swapped for a pool sentence. Basic masking then runs with a single
/// budget over the tokens of all turns.
pub fn build_dlm_example(
    thread: &DialogueThread,
    pool: &SentencePool,
    cfg: &DlmConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<DlmExample, DialogueError> {
    if thread.turns.is_empty() {
        return Err(AnnotateError::EmptyThread.into());
    }
    let pattern = thread.pattern()?;
    if !(0.0..=1.0).contains(&cfg.fake_prob) {
        return Err(DialogueError::BadFakeProb(cfg.fake_prob));
    }
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(MaskingError::BadRatio(cfg.mask_ratio).into());
    }
    let n_turns = thread.turns.len();
    if cfg.max_len < n_turns + 2 {
        return Err(DialogueError::TooShort {
            max_len: cfg.max_len,
            turns: n_turns,
        });
    }

    let mut sentences: Vec<AnnotatedSentence> =
        thread.turns.iter().map(|(_, s)| s.clone()).collect();
    let mut replaced_turn = None;
    if cfg.fake_prob > 0.0 && rng.random::<f64>() < cfg.fake_prob {
        let k = rng.random_range(0..n_turns);
        sentences[k] = pool.sample_excluding(rng, &sentences[k].ids())?.clone();
        replaced_turn = Some(k);
    }
    fit_turns(&mut sentences, cfg.max_len - (n_turns + 1));

    let turns: Vec<(Role, Vec<u32>)> = thread
        .turns
        .iter()
        .zip(&sentences)
        .map(|((r, _), s)| (*r, s.ids()))
        .collect();
    let (ids, types, offsets) = dlm_layout(&turns);

    // Joint budget over every turn token.
    let positions_flat: Vec<usize> = turns
        .iter()
        .zip(&offsets)
        .flat_map(|((_, t), &off)| (0..t.len()).map(move |i| off + i))
        .collect();
    let budget = mask_budget(positions_flat.len(), cfg.mask_ratio);
    let mut picked = index::sample(rng, positions_flat.len(), budget).into_vec();
    picked.sort_unstable();
    let mask_positions: Vec<usize> = picked.into_iter().map(|i| positions_flat[i]).collect();
    let replacements =
        apply_replacements(mask_positions.len(), rng, cfg.replace_probs, vocab_size)?;
    let labels = mask_positions.iter().map(|&p| ids[p]).collect();
    let plan = MaskingPlan {
        stage: Stage::Basic,
        mask_positions,
        replacements,
        labels,
    };
    let example = finish_example(ids, types, &plan, cfg.max_len);
    let role_ids = example.type_ids.iter().map(|t| t - TYPE_ROLE_Q).collect();
    Ok(DlmExample {
        example,
        role_ids,
        is_real: replaced_turn.is_none(),
        replaced_turn,
        pattern,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::Replacement;
    use crate::rng::{substream, Stream};
    use crate::textnorm::{Tokenizer, Vocabulary, CLS, MASK, PAD, SEP};

    fn tokenizer() -> Tokenizer {
        let words = [
            "how", "old", "are", "you", "？", "8", ".", "where", "is", "your", "hometown", "?",
            "fine", "thanks", "hello",
        ];
        Tokenizer::new(Vocabulary::with_pieces(words).unwrap())
    }

    fn thread(tk: &Tokenizer, turns: &[(Role, &str)]) -> DialogueThread {
        DialogueThread::new(
            turns
                .iter()
                .map(|(r, t)| (*r, AnnotatedSentence::plain(tk, t)))
                .collect(),
        )
        .unwrap()
    }

    fn fig3(tk: &Tokenizer) -> DialogueThread {
        thread(
            tk,
            &[
                (Role::Q, "How old are you ？"),
                (Role::R, "8 ."),
                (Role::Q, "Where is your hometown ?"),
            ],
        )
    }

    #[test]
    fn figure_three_layout() {
        let tk = tokenizer();
        let t = fig3(&tk);
        let turns: Vec<(Role, Vec<u32>)> = t.turns.iter().map(|(r, s)| (*r, s.ids())).collect();
        let (ids, types, _) = dlm_layout(&turns);
        let id = |w: &str| tk.vocab.id(w).unwrap();
        let positions = vec![2, 7, 13];
        let plan = MaskingPlan {
            stage: Stage::Basic,
            labels: positions.iter().map(|&p| ids[p]).collect(),
            replacements: vec![Replacement::Mask; 3],
            mask_positions: positions,
        };
        let ex = finish_example(ids, types, &plan, 20);
        let render: Vec<&str> = ex.input_ids[..16]
            .iter()
            .map(|&i| tk.vocab.token(i).unwrap())
            .collect();
        assert_eq!(
            render.join(" "),
            "[CLS] how [MASK] are you ？ [SEP] [MASK] . [SEP] where is your [MASK] ? [SEP]"
        );
        assert_eq!(ex.labels, vec![id("old"), id("8"), id("hometown")]);
        assert_eq!(
            &ex.type_ids[..16],
            &[2, 2, 2, 2, 2, 2, 2, 3, 3, 3, 2, 2, 2, 2, 2, 2]
        );
    }

    #[test]
    fn roles_follow_turn_ranges() {
        let tk = tokenizer();
        let t = fig3(&tk);
        let cfg = DlmConfig {
            max_len: 24,
            fake_prob: 0.0,
            ..Default::default()
        };
        let ex = build_dlm_example(
            &t,
            &SentencePool::default(),
            &cfg,
            tk.vocab.len(),
            &mut substream(1, Stream::Dialogue, 0),
        )
        .unwrap();
        assert!(ex.is_real);
        assert_eq!(ex.pattern, "QRQ");
        // [CLS] 5 tokens [SEP] | 2 tokens [SEP] | 5 tokens [SEP]
        let mut want = vec![0u32; 7];
        want.extend([1, 1, 1]);
        want.extend([0; 6]);
        assert_eq!(&ex.role_ids[..16], &want[..]);
        assert_eq!(ex.example.input_ids[0], CLS);
        assert_eq!(ex.example.input_ids[15], SEP);
        assert_eq!(ex.example.input_ids[16], PAD);
        let budget = mask_budget(12, 0.15);
        assert_eq!(ex.example.mask_positions.len(), budget);
        for &p in &ex.example.mask_positions {
            assert!(![0, 6, 9, 15].contains(&p));
        }
    }

    #[test]
    fn fake_prob_zero_is_always_real() {
        let tk = tokenizer();
        let t = fig3(&tk);
        let pool = SentencePool::from_threads([&t]);
        let cfg = DlmConfig {
            max_len: 24,
            fake_prob: 0.0,
            ..Default::default()
        };
        for seed in 0..200 {
            let ex = build_dlm_example(
                &t,
                &pool,
                &cfg,
                tk.vocab.len(),
                &mut substream(seed, Stream::Dialogue, 0),
            )
            .unwrap();
            assert!(ex.is_real && ex.replaced_turn.is_none());
        }
    }

    #[test]
    fn fake_prob_one_replaces_one_turn_evenly() {
        let tk = tokenizer();
        let t = thread(&tk, &[(Role::Q, "how are you"), (Role::R, "fine thanks")]);
        let pool = SentencePool::new(vec![
            AnnotatedSentence::plain(&tk, "hello"),
            AnnotatedSentence::plain(&tk, "where is your hometown"),
        ]);
        let cfg = DlmConfig {
            max_len: 16,
            fake_prob: 1.0,
            replace_probs: [0.0, 0.0, 1.0],
            ..Default::default()
        };
        let mut counts = [0usize; 2];
        for seed in 0..10_000u64 {
            let ex = build_dlm_example(
                &t,
                &pool,
                &cfg,
                tk.vocab.len(),
                &mut substream(seed, Stream::Dialogue, 0),
            )
            .unwrap();
            assert!(!ex.is_real);
            let k = ex.replaced_turn.unwrap();
            counts[k] += 1;
            let original = t.turns[k].1.ids();
            let (_, _, offsets) = dlm_layout(
                &t.turns
                    .iter()
                    .map(|(r, s)| (*r, s.ids()))
                    .collect::<Vec<_>>(),
            );
            let seg = &ex.example.input_ids[offsets[k]..];
            assert!(!seg.starts_with(&original) || seg[original.len()] != SEP);
        }
        let frac = counts[0] as f64 / 1e4;
        assert!((frac - 0.5).abs() <= 0.02, "{counts:?}");
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let tk = tokenizer();
        let t = thread(&tk, &[(Role::Q, "hello"), (Role::R, "hello")]);
        let pool = SentencePool::from_threads([&t]);
        let cfg = DlmConfig {
            fake_prob: 1.0,
            ..Default::default()
        };
        let err = build_dlm_example(
            &t,
            &pool,
            &cfg,
            tk.vocab.len(),
            &mut substream(0, Stream::Dialogue, 0),
        )
        .unwrap_err();
        assert!(matches!(err, DialogueError::PoolExhausted));
    }

    #[test]
    fn long_turns_are_trimmed() {
        let tk = tokenizer();
        let long = "how old are you how old are you how old are you";
        let t = thread(&tk, &[(Role::Q, long), (Role::R, "fine")]);
        let cfg = DlmConfig {
            max_len: 8,
            fake_prob: 0.0,
            ..Default::default()
        };
        let ex = build_dlm_example(
            &t,
            &SentencePool::default(),
            &cfg,
            tk.vocab.len(),
            &mut substream(0, Stream::Dialogue, 0),
        )
        .unwrap();
        assert_eq!(ex.example.seq_len(), 8);
        assert_eq!(ex.example.input_ids[5], SEP);
        assert_eq!(ex.example.input_ids[7], SEP);
        assert!(ex.example.input_ids.iter().filter(|&&i| i == MASK).count() <= 1);
    }
}
