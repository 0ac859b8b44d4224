//! Layer-graph model representation, shape inference and the reference
//! forward pass.

pub(crate) mod graph;
pub mod io;
pub mod kernels;

use thiserror::Error;

use crate::tensor::TensorError;

pub use graph::{infer_shapes, topo_order, Architecture, LayerKind, LayerSpec, ModelGraph, WeightMap};
pub use io::{load_model, save_model};
pub use kernels::{forward, forward_with, run_batch, run_model, run_model_with};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("duplicate layer id `{0}`")]
    DuplicateLayer(String),
    #[error("layer `{layer}` references unknown input `{input}`")]
    UnknownInput { layer: String, input: String },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{layer}` expects {expected} input(s), got {got}")]
    Arity { layer: String, expected: usize, got: usize },
    #[error("layer graph contains a cycle")]
    CycleDetected,
    #[error("graph must contain exactly one Input layer and it must be the entry: {0}")]
    BadEntry(String),
    #[error("layer `{0}` is not on a path from entry to exit")]
    Disconnected(String),
    #[error("shape mismatch at layer `{layer}`: {reason}")]
    ShapeMismatch { layer: String, reason: String },
    #[error("layer `{layer}` is missing weight `{weight}`")]
    MissingWeight { layer: String, weight: String },
    #[error("layer `{layer}` has invalid weight references: {reason}")]
    BadWeightRefs { layer: String, reason: String },
    #[error("input rank {got} does not match the declared rank {expected}")]
    RankMismatch { expected: usize, got: usize },
    #[error("invalid layer parameters at `{layer}`: {reason}")]
    BadParams { layer: String, reason: String },
    #[error("model format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    pub(crate) fn shape(layer: &str, reason: impl Into<String>) -> Self {
        ModelError::ShapeMismatch {
            layer: layer.to_string(),
            reason: reason.into(),
        }
    }
}
