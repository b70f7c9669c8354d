//! Desk-scale toolkit for bilingual clinical language models: corpus
//! balancing, byte-level BPE, masked-language-model pretraining of a
//! transformer encoder, sliding-window (long input) conversion, token
//! classification fine-tuning and entity-level evaluation.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod mlmdata;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod seed;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, Result};
