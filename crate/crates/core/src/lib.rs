//! CA-BERT: a context-necessity classifier for multi-turn chat.
//!
//! The crate hosts the whole pipeline behind the `context-gate` tool: dense
//! tensor math with hand-written backward passes ([`tensor`]), a word-level
//! tokenizer ([`tokenizer`]), the encoder/classifier network ([`model`]),
//! the training regimen and baselines ([`trainer`]), dataset ingestion and
//! synthesis ([`data`]), and classification metrics ([`metrics`]).
//!
//! Everything stochastic takes an explicit seed; identical seeds and inputs
//! give bit-identical models, histories, and checkpoints.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
