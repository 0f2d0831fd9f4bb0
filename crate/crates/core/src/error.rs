//! Crate-level error with a coarse classification for exit codes.

use std::fmt;

use thiserror::Error;

use crate::annotate::AnnotateError;
use crate::config::ConfigIssue;
use crate::dialogue::DialogueError;
use crate::encoder::EncoderError;
use crate::eval::EvalError;
use crate::masking::MaskingError;
use crate::tensor::TensorError;
use crate::textnorm::TextError;
use crate::train::{CheckpointError, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    /// Invalid configuration or arguments.
    Config,
    /// Malformed or missing input data.
    Data,
    /// Failure while computing (non-finite values, write errors).
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Runtime => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Runtime => "runtime",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{} config problem(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigIssue>),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn encoder_kind(e: &EncoderError) -> ErrorKind {
    match e {
        EncoderError::Config(_) | EncoderError::HeadMismatch(_) => ErrorKind::Config,
        EncoderError::IdOutOfRange { .. }
        | EncoderError::TooLong { .. }
        | EncoderError::ParamMismatch(_) => ErrorKind::Data,
        EncoderError::Tensor(_) => ErrorKind::Runtime,
    }
}

fn checkpoint_kind(e: &CheckpointError) -> ErrorKind {
    match e {
        CheckpointError::ConfigMismatch { .. } => ErrorKind::Config,
        CheckpointError::Encoder(e) => encoder_kind(e),
        _ => ErrorKind::Data,
    }
}

fn dialogue_kind(e: &DialogueError) -> ErrorKind {
    match e {
        DialogueError::Thread(_) | DialogueError::PoolExhausted => ErrorKind::Data,
        DialogueError::Masking(_)
        | DialogueError::BadFakeProb(_)
        | DialogueError::TooShort { .. } => ErrorKind::Config,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Masking(_) => ErrorKind::Config,
            Error::Data(_) | Error::Text(_) | Error::Annotate(_) | Error::Io { .. } => {
                ErrorKind::Data
            }
            Error::Dialogue(e) => dialogue_kind(e),
            Error::Tensor(_) => ErrorKind::Runtime,
            Error::Encoder(e) => encoder_kind(e),
            Error::Checkpoint(e) => checkpoint_kind(e),
            Error::Train(e) => match e {
                TrainError::Config(_) | TrainError::Masking(_) => ErrorKind::Config,
                TrainError::Data(_) => ErrorKind::Data,
                TrainError::Dialogue(d) => dialogue_kind(d),
                TrainError::Encoder(e) => encoder_kind(e),
                TrainError::Checkpoint(c) => checkpoint_kind(c),
                TrainError::Tensor(_)
                | TrainError::NonFiniteLoss { .. }
                | TrainError::Io { .. } => ErrorKind::Runtime,
            },
            Error::Eval(e) => match e {
                EvalError::Spec(_) => ErrorKind::Config,
                EvalError::Data { .. } | EvalError::Metric(_) | EvalError::Annotate(_) => {
                    ErrorKind::Data
                }
                EvalError::Encoder(e) => encoder_kind(e),
                EvalError::Tensor(_) => ErrorKind::Runtime,
            },
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
