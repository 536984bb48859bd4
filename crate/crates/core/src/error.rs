//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("input `{0}` is not bound for this evaluation")]
    UnboundInput(String),

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("backward root node {node} is not a scalar (shape {shape:?})")]
    NonScalarRoot { node: usize, shape: Vec<usize> },

    #[error("node {0} was not computed in this evaluation")]
    Unvisited(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("gradient is exactly zero; the input is stationary for this loss")]
    ZeroGradient,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; partial history attached")]
    NanLoss {
        epoch: usize,
        step: usize,
        history_csv: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
