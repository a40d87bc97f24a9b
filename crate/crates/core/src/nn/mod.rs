//! Dense `f64` tensors, tape-based reverse-mode autodiff, transformer
//! layers, the Adam optimizer and the `SMB1` checkpoint container.

mod checkpoint;
mod graph;
pub mod gradcheck;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Container, ContainerError, FORMAT_VERSION, MAGIC};
pub use graph::{Graph, Mask, Var};
pub use layers::{
    attention_with_weights, positional_encoding, scaled_dot_product_attention, AttentionConfig,
    BlockDims, DecoderLayer, EncoderLayer, ForwardMode,
};
pub use optim::{clip_grad_norm, AdamState};
pub use params::ParamStore;
pub use tensor::Tensor;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum NnError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("axis {axis} out of range for {ndim}-d tensor")]
    InvalidAxis { axis: usize, ndim: usize },
    #[error("attention row {0} has every key masked")]
    FullyMaskedRow(usize),
    #[error("positional encoding needs an even d_model, got {0}")]
    OddDModel(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("every target is ignored")]
    AllIgnored,
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
