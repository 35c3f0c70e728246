// SPDX-License-Identifier: Apache-2.0

use entalign_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid grammar: {0}")]
    Grammar(String),
    #[error("invalid knowledge base: {0}")]
    KnowledgeBase(String),
    #[error("invalid world spec: {0}")]
    World(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("unknown position {0:?}")]
    UnknownPosition(String),
    #[error("empty description text")]
    EmptyDescription,
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("checkpoint fingerprint {found} does not match configuration {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Grammar(_)
                | Error::KnowledgeBase(_)
                | Error::World(_)
                | Error::UnknownEntity(_)
                | Error::UnknownPosition(_)
                | Error::EmptyDescription
                | Error::FingerprintMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
