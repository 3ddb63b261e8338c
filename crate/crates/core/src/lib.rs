//! Task-incremental continual learning with gated sub-networks.
//!
//! A frozen MLP backbone carries frozen bottleneck adapters. Each task learns
//! popup scores over the adapter weights; thresholding the scores yields a
//! binary gate per weight, and the gated adapters plus a per-task head form
//! that task's model. Only the gates are stored, so earlier tasks are never
//! disturbed. Gradients of the scores are soft-masked by the importance that
//! earlier tasks assigned to them, and each task starts from the previous
//! task's scores, which lets knowledge flow forward.

pub mod codec;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gating;
pub mod masking;
pub mod model;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Result, TssError};
pub use eval::ResultMatrix;
pub use gating::{GateSet, PackedGates};
pub use masking::ImportanceMap;
pub use model::{GatedModel, ModelConfig, ScoreSet};
pub use taskgen::{StreamKind, TaskStream};
pub use tensor::{Matrix, Rng};
pub use trainer::{run_sequence, SequenceRun, TrainConfig, Variant};
