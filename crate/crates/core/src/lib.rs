//! Probing harness for quantitative values in token-embedding representations.
//!
//! The crate generates seeded synthetic numeracy datasets, maps their inputs to
//! per-token embedding matrices through pluggable frozen providers, trains small
//! probe networks on top of those matrices and reports multi-run aggregates.
//!
//! Module map:
//!
//! - [`synthgen`]: the six probing tasks and their dataset files
//! - [`tokenizer`]: closed vocabulary and digit-level tokenization
//! - [`embeddings`]: random, oracle and file-backed providers, QPEMB files
//! - [`nn`]: dense/ReLU/BiLSTM layers, losses, SGD with momentum
//! - [`probes`]: the three probe architectures
//! - [`training`]: single runs with early stopping, grid search
//! - [`metrics`]: RMSE, log-scale RMSE, accuracy, aggregation
//! - [`experiments`]: multi-run protocol, manifests, CSV and text reports
//! - [`cli`]: the `quantprobe` command line

pub mod cli;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod probes;
pub mod synthgen;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
