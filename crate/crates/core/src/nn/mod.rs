//! Dense tensors, reverse-mode differentiation and the layers used by the
//! painting network and the crop localizers.

mod graph;
mod kernels;
mod layers;
mod params;
mod tensor;

pub mod checkpoint;
pub mod optim;

use thiserror::Error;

pub use graph::{softmax_rows, Graph, NodeId, RunningUpdate};
pub use layers::{BatchNorm2d, Conv2d, Init, Linear, Mode, ResBlock, BN_EPS, BN_MOMENTUM};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch normalization needs at least 2 samples in training mode")]
    DegenerateBatch,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
