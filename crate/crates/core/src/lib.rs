//! Phonetically associated triplet network (PATN) for acoustic word
//! embeddings.
//!
//! A bidirectional LSTM maps a variable-length frame sequence to one
//! embedding. Training combines a triplet loss on embeddings with a
//! frame-level phone-state cross-entropy read from a lower layer:
//! `(1 - lambda) * triplet + lambda * ce`. Evaluation enrolls five
//! instances per keyword and reports recall at 1.0 false alarm per hour.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod encoder;
mod error;
pub mod evalkit;
pub mod numcore;
pub mod objectives;
pub mod optim;

pub use error::{Error, Result};
