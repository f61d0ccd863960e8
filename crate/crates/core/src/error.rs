// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by op #{index} ({op})")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{stage} diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("unknown layer index {0}")]
    UnknownLayer(usize),

    #[error("layer {0} has no trainable parameters")]
    NotTrainable(usize),

    #[error("no trained SAE for tap layer {0}")]
    UntrainedLayer(usize),

    #[error("frozen parameters changed during {0}")]
    FrozenMutated(&'static str),

    #[error("stage {stage} cannot run before stage {required} has completed")]
    StageOrder { stage: u8, required: u8 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
