//! Synthetic inputs shared by the benchmarks.

use kmask_core::annotate::AnnotatedSentence;
use kmask_core::encoder::ModelConfig;
use kmask_core::rng::{substream, Rng, Stream};
use kmask_core::textnorm::{build_vocab, normalize, Span, TradMap, NUM_SPECIALS};
use kmask_core::train::{PreparedBatch, Task};
use kmask_core::{Encoder, Stage, Tokenizer};
use rand::Rng as _;

const HAN: &[char] = &[
    '中', '国', '北', '京', '哈', '尔', '滨', '是', '的', '人', '大', '学', '省', '会',
];
const LATIN: &[&str] = &[
    "harbin", "capital", "province", "ice", "festival", "world", "2024",
];

pub fn rng(key: u64) -> Rng {
    substream(17, Stream::Eval, key)
}

/// Mixed Chinese and Latin text of roughly `chars` characters.
pub fn mixed_text(r: &mut Rng, chars: usize) -> String {
    let mut s = String::with_capacity(chars * 3);
    while s.chars().count() < chars {
        if r.random_bool(0.7) {
            s.push(HAN[r.random_range(0..HAN.len())]);
        } else {
            s.push(' ');
            s.push_str(LATIN[r.random_range(0..LATIN.len())]);
            s.push(' ');
        }
    }
    s
}

/// A tokenizer whose vocabulary covers `lines`.
pub fn tokenizer_for(lines: &[String]) -> Tokenizer {
    let trad = TradMap::default();
    let texts: Vec<_> = lines.iter().map(|l| normalize(l, &trad)).collect();
    Tokenizer::new(build_vocab(&texts, 1, 10_000).expect("non-empty corpus"))
}

/// `count` sentences of `len` random ids with alternating phrase and
/// entity spans every few tokens.
pub fn sentences(r: &mut Rng, count: usize, len: usize, vocab: usize) -> Vec<AnnotatedSentence> {
    (0..count)
        .map(|_| {
            let ids: Vec<u32> = (0..len)
                .map(|_| r.random_range(NUM_SPECIALS..vocab as u32))
                .collect();
            let (mut phrases, mut entities) = (Vec::new(), Vec::new());
            let mut at = 0;
            while at + 3 <= len {
                let span = Span::new(at, at + r.random_range(2..=3));
                if phrases.len() <= entities.len() {
                    phrases.push(span);
                } else {
                    entities.push(span);
                }
                at = span.end + r.random_range(1..4);
            }
            AnnotatedSentence::from_ids(&ids, phrases, entities).expect("well-formed spans")
        })
        .collect()
}

pub fn model(layers: usize, hidden: usize, max_len: usize, vocab: usize) -> Encoder {
    let cfg = ModelConfig {
        layers,
        hidden,
        heads: 4,
        max_len,
        vocab_size: vocab,
        ..ModelConfig::default()
    };
    Encoder::new(cfg, &mut rng(1)).expect("valid config")
}

/// An MLM batch of `size` full-length basic-masked sentences.
pub fn mlm_batch(r: &mut Rng, size: usize, max_len: usize, vocab: usize) -> PreparedBatch {
    let cfg = kmask_core::masking::MaskingConfig {
        max_len,
        ..Default::default()
    };
    let examples = sentences(r, size, max_len - 2, vocab)
        .iter()
        .map(|s| {
            kmask_core::masking::build_mlm_example(s, None, Stage::Basic, &cfg, vocab, r)
                .expect("valid masking config")
        })
        .collect();
    PreparedBatch {
        task: Task::Mlm,
        stage: Stage::Basic,
        examples,
        is_real: None,
    }
}
