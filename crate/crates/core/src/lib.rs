//! A low-rank pairwise CRF head for multi-label classification.
//!
//! Label variables are coupled through four pairwise log-potential matrices
//! that are never materialized: they are products of two N x R factor
//! matrices computed from label-phrase embeddings. Mean-field inference runs
//! for a fixed number of damped iterations in O(NR) per iteration and is
//! differentiated end to end.

pub mod alloc_audit;
pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod math;
pub mod metrics;
pub mod mfvi;
pub mod oracle;
pub mod potentials;
pub mod rng;
pub mod synth;
pub mod training;
pub mod unary;

pub use error::{Error, Result};
