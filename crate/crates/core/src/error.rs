//! Error type shared across the engine.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the engine.
///
/// Every variant maps to a stable machine-parsable class string (see
/// [`Error::class`]) which the CLI prints as the first token of its
/// single-line error output.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree with an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A parameter violated its documented bounds.
    #[error("configuration error: {0}")]
    Config(String),
    /// A timestep lies outside the schedule.
    #[error("range error: {0}")]
    Range(String),
    /// A pair of timesteps violates the required ordering.
    #[error("ordering error: {0}")]
    Ordering(String),
    /// A prompt contained a word outside the vocabulary.
    #[error("vocabulary error: unknown token {0:?}")]
    UnknownToken(String),
    /// A checkpoint or trajectory file is malformed.
    #[error("format error: {0}")]
    Format(String),
    /// An image file is malformed or its dimensions are unusable.
    #[error("codec error: {0}")]
    Codec(String),
    /// Stored provenance (schedule/model hashes) disagrees with the consumer.
    #[error("provenance error: {0}")]
    Provenance(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training aborted (non-finite loss or bad inputs).
    #[error("training error: {0}")]
    Training(String),
    /// A public operation produced NaN/Inf.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable kebab-case class tag for machine-readable CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension-error",
            Error::Config(_) => "configuration-error",
            Error::Range(_) => "range-error",
            Error::Ordering(_) => "ordering-error",
            Error::UnknownToken(_) => "vocabulary-error",
            Error::Format(_) => "format-error",
            Error::Codec(_) => "codec-error",
            Error::Provenance(_) => "provenance-error",
            Error::Usage(_) => "usage-error",
            Error::Training(_) => "training-error",
            Error::NonFinite(_) => "non-finite-error",
            Error::Io(_) => "io-error",
        }
    }
}
