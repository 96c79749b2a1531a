//! Conditional sequence generation trained against a reward-matched
//! surrogate objective.

pub mod augmentation;
pub mod dataset;
pub mod entropy;
pub mod evalmetrics;
pub mod evaluator;
pub mod experiment;
pub mod grammar;
pub mod model;
pub mod nn;
pub mod reward;
pub mod training;
