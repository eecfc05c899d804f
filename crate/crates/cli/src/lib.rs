//! Experiment driver over the unrolled-solver library: dataset synthesis,
//! hyperparameter training, reconstruction, evaluation, and gradient checks,
//! each echoing a rerunnable configuration next to its artifacts.

pub mod commands;
pub mod config;
pub mod presets;
