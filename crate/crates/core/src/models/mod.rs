//! Encoder classifiers, their configuration, and the four model families.

mod config;
mod model;
mod variant;

pub use config::{derive_student_config, ModelConfig, ParamBreakdown, PositionalMode, SharingMode};
pub use model::{
    build_model, forward_classify, forward_mlm, forward_pair_classify, param_count, Forward,
    Model, ParamGroup,
};
pub use variant::{MaskingStrategy, PairObjective, Variant};

#[cfg(test)]
mod tests;
