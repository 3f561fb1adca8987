//! File IO, model formats, parallel evaluation and the `fxpnet` command-line
//! tool, built on [`fxpnet_core`].

pub mod cli;
pub mod dataio;
pub mod error;
pub mod modelio;
pub mod parallel;

pub use error::{Error, Result};
pub use parallel::ParallelEvaluator;
