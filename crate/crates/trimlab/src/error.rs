//! Crate-wide error type.
//!
//! Every fallible public function in the crate returns [`Result`]. The
//! variants are coarse on purpose: callers mostly need to distinguish
//! *caller bugs* (shape/range/contract violations), *numeric blowups*
//! (which abort a training run but not the sweep), and *I/O or format*
//! problems with files on disk.

use std::fmt;

/// Alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric argument is outside its documented domain.
    #[error("value out of range: {0}")]
    Range(String),

    /// A non-finite value appeared in the forward pass of the given layer.
    #[error("non-finite values in the output of layer {layer} ({what})")]
    NonFinite { layer: usize, what: String },

    /// The training loss became NaN/inf; the run cannot continue.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    /// Batch statistics cannot be computed (train-mode batch of size 1).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A pruning criterion cannot be evaluated for a layer.
    #[error("criterion not applicable to layer {layer}: {why}")]
    CriterionInapplicable { layer: usize, why: String },

    /// A file did not decode: wrong magic, truncation, bad tag, …
    /// `offset` is the byte position at which decoding failed.
    #[error("format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },

    /// An experiment configuration could not be parsed or is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand constructors used all over the crate.
    pub fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }
    pub fn range(msg: impl fmt::Display) -> Self {
        Error::Range(msg.to_string())
    }
    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }
    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }
    pub fn format(offset: u64, what: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            what: what.to_string(),
        }
    }
}
