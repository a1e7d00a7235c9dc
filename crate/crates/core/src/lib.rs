//! In-context example valuation: prompt pools, CondAcc and Datamodels
//! scoring, subset selection, and evaluation against a language-model backend.

pub mod analysis;
pub mod backend;
pub mod condacc;
pub mod corpus;
pub mod datamodels;
pub mod evaluation;
pub mod harness;
pub mod error;
pub mod pool;
pub mod selection;
pub mod stats;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
