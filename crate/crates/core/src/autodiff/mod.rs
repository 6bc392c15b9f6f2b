//! Dense reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation of one forward pass on a tape; calling
//! [`Graph::backward`] replays the tape in reverse and accumulates gradients
//! into the [`ParameterSet`] the parameters were read from. The tape is
//! discarded after use and rebuilt on the next forward pass, so sequence
//! lengths may change freely between passes.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_floored, FdReport, ParamFdResult};
pub use graph::{Graph, Var};
pub use params::ParameterSet;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", tensor::numel(.shape))]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("softmax row {0} is fully masked")]
    FullyMaskedRow(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("parameter `{0}` has no gradient; run backward first")]
    MissingGradient(String),
    #[error("invalid argument for {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
