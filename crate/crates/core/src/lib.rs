//! Write-gated KV admission for a CPU reference transformer.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod gating;
pub mod kvstore;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
