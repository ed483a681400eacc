//! Minimal reverse-mode differentiation over `f64` matrices.
//!
//! The operation set is exactly what the trajectory models need: affine
//! layers, ReLU, batch norm, softmax, multi-head attention, GRU cells,
//! causal convolutions, set sums, Huber penalties and reductions. Every
//! primitive carries a hand-written reverse pass that is checked against
//! central differences by [`gradcheck`].

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod primitive_checks;
pub mod tensor;

pub use checkpoint::{Checkpoint, EntryKind, RunMetadata};
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{huber, BnBuffers, Gradients, Graph, Mode, NodeId};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{BufferId, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
