//! Metrics, capability scorecards, corpus loading and the `scicore` command line.

pub mod cli;
pub mod error;
pub mod loader;
pub mod metrics;
pub mod scorecard;

pub use error::{HarnessError, Result};
