//! Simulate human-assistant interaction studies with language-model agents
//! and compare the simulated outcomes with the original findings.

// Negated comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod context;
pub mod engine;
pub mod error;
pub mod evalpipe;
pub mod leakage;
pub mod metrics;
pub mod prompts;
pub mod provider;
pub mod trace;

pub use error::{Error, Result};
