//! Layers, the encoder/classifier model, dropout, optimizers and checkpoints.

pub mod checkpoint;
pub mod dropout;
pub mod layer;
pub mod model;
pub mod optim;

pub use dropout::{classical_dropout, dropout_mask};
pub use layer::LayerSpec;
pub use model::{ActivationTrace, ArchPreset, Bound, Mode, Model, Param, Part};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
