//! Dense tensors, a reverse-mode gradient tape, Adam, and gradient checking.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;


pub use adam::Adam;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use gradcheck::{check_gradients, compare_gradients, GradCheckReport, ParamGradCheck};
pub use params::{AdamState, Gradients, Init, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;


/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("softmax row {row} has every entry masked")]
    FullyMasked { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no gradients populated; run backward before stepping")]
    MissingGradients,
    #[error("parameter {0:?} already exists")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("invalid normal init std {0}")]
    BadInit(f64),
    #[error("training loss became {0} at step {1}")]
    NonFiniteLoss(f64, usize),
}
