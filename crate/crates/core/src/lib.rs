//! Passage-specific prompt tuning (PSPT) for query-likelihood passage
//! reranking on top of a frozen micro decoder-only language model.

pub mod adapter;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod scoring;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{PsptError, Result};
