use thiserror::Error;

use crate::kvstore::CacheStats;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },

    #[error("fully suppressed row {row}")]
    FullySuppressedRow { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of pages (resident {}, pages allocated {})", .stats.resident_entries, .stats.pages_allocated)]
    OutOfPages { stats: CacheStats },

    #[error("cache is not empty")]
    CacheNotEmpty,

    #[error("unknown token id {id} (vocab {vocab})")]
    UnknownToken { id: u32, vocab: usize },

    #[error("policy mismatch: cache built with {cached}, step requested {requested}")]
    PolicyMismatch { cached: String, requested: String },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("bad gate file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
