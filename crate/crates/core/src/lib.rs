//! Desk-scale decoder-only transformer with dense and activation-sparse FFN
//! execution: per-token threshold truncation, Griffin-style top-k, and
//! prompt-derived threshold masks.

pub mod analysis;
pub mod bench;
pub mod error;
pub mod model;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
