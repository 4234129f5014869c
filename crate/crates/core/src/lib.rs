//! Choosing the number of clusters for short-text corpora by weighing
//! within-cluster semantic density against how well clusters can be
//! recovered from their names, both measured against a random baseline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod corpus;
pub mod density;
pub mod error;
pub mod gmm;
pub mod goldilocks;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod regression;
pub mod seed;
pub mod serde_float;
pub mod synthetic;

pub use error::{Error, Result};
