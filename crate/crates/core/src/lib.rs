//! Subject-aware self-supervised learning for multimodal wellbeing data.
//!
//! The crate holds a small reverse-mode autodiff engine ([`adcore`]), segment
//! encoders with mean pooling ([`encoders`]), the VICReg regularizers and
//! their subject-aware batch variants ([`losses`]), data handling
//! ([`data`]), the training pipeline ([`training`]) and group-fairness
//! evaluation ([`fairness`]).

pub mod adcore;
pub mod data;
pub mod encoders;
pub mod fairness;
pub mod losses;
pub mod seed;
pub mod training;

pub use adcore::{AdError, Graph, Tensor};
pub use data::{DataError, SplitFractions, SplitPlan, SubjectRecord, SynthConfig};
pub use encoders::{Checkpoint, EmbeddingSet, EncoderError, EncoderSpec, SegmentEncoder};
pub use fairness::{FairnessError, FairnessReport, Prediction, PredictionSet};
pub use losses::{LossBreakdown, LossConfig, LossError, LossWeights, Method, ModalityRoles, Pooling, StatScope};
pub use training::{Model, Probe, TrainConfig, TrainError};
