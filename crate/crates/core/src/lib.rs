//! Tools for measuring and teaching knowledge-boundary expression in
//! language models: confidence probing, known/unknown partitioning,
//! awareness dataset construction, evaluation, and a small reference
//! trainer for the consistency-regularized objective.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod partition;
pub mod probe;
pub mod prompts;
pub mod signals;
pub mod synthetic;
pub mod toy_trainer;

pub use error::{Error, Result};
