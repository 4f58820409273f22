//! Cross-transformer person attribute recognition and attribute-based
//! person retrieval.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod query;
pub mod report;
pub mod retrieval;
pub mod schema;
pub mod synth;

pub use error::{ClearError, Result};
