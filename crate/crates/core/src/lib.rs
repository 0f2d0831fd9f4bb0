//! Knowledge-masking language model pretraining at desk scale.
//!
//! The pipeline runs from raw text to a trained encoder:
//!
//! ```text
//! raw text ─ textnorm ─ annotate ─┬─ masking  ─┐
//!                                 └─ dialogue ─┴─ train (encoder, tensor) ─ eval
//! ```
//!
//! * [`textnorm`]: case folding, traditional→simplified mapping, CJK-aware
//!   pre-tokenization, WordPiece and vocabulary files.
//! * [`annotate`]: phrase/entity spans aligned to tokens; corpus readers.
//! * [`masking`]: basic, phrase and entity masking plans and MLM examples.
//! * [`dialogue`]: dialogue LM examples with role embeddings and fake threads.
//! * [`tensor`]: float32 tensors, reverse-mode tape, Adam.
//! * [`encoder`]: transformer encoder and its MLM, real/fake and task heads.
//! * [`train`]: stage curriculum, MLM/DLM alternation, checkpoints, metrics.
//! * [`eval`]: cloze ranking, fine-tuning, span F1 and MRR.
//! * [`experiment`]: config validation, run manifests and the ablation driver.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod config;
pub mod dialogue;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod masking;
pub mod rng;
pub mod tensor;
pub mod textnorm;
pub mod train;

pub use annotate::{AnnotatedSentence, DialogueThread, Role};
pub use config::RunConfig;
pub use encoder::{Encoder, ModelConfig};
pub use error::{Error, ErrorKind, Result};
pub use masking::{MaskedExample, Stage};
pub use tensor::{Tensor, TensorError};
pub use textnorm::{Span, Tokenizer, Vocabulary};
