//! Transformer encoder classifiers for insincere question detection, built
//! on a small reverse-mode autodiff engine.

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
