//! Reproducible experiment pipeline on top of `fairwell`: generate a
//! synthetic corpus, pretrain encoders, evaluate a linear probe for
//! performance and group fairness, and collect runs onto a Pareto front.
//!
//! Every command writes a manifest next to its outputs and exits with
//! 0 on success, 2 on usage or config problems, 3 when training diverges
//! and 4 when the data violates a precondition.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use commands::{evaluate, pareto, pretrain, synth, EvaluateArgs, ParetoArgs, PretrainArgs, SynthArgs};
pub use config::ExperimentConfig;
pub use error::{exit_code, CliError};
pub use fairwell::{FairnessReport, Method, Pooling, SubjectRecord, SynthConfig, TrainConfig};
pub use manifest::{RunManifest, RunStatus};
