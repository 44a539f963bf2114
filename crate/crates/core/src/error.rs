//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("vocabulary error: unknown token id {0}")]
    UnknownToken(usize),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("infeasible alignment: {n} phonemes cannot fit in {t} frames")]
    Infeasible { n: usize, t: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown utterance id {0}")]
    UnknownUtterance(String),

    #[error("unknown speaker id {0}")]
    UnknownSpeaker(String),

    #[error("missing style source: no reference mel and no cached stats for the speaker")]
    MissingStyleSource,

    #[error("training diverged at step {step}; last good checkpoint: {ckpt}")]
    Diverged { step: usize, ckpt: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
