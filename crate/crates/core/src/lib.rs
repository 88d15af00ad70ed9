//! Desk-scale experiments on domain-adaptive pre-training and adapters:
//! a from-scratch transformer encoder, masked-LM pre-training, multi-label
//! classification, dual-encoder catchphrase retrieval, and the metrics and
//! table arithmetic used to compare them.

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod tasks;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
