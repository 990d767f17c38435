//! Minimal dense neural-network toolkit: tensors, fixed layers with
//! hand-written backward passes, Adam and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod lstm;
pub mod ops;
pub mod params;
pub mod tensor;

use thiserror::Error;

pub use attention::{mha_backward, mha_forward, MhaCache, MhaGrads, MhaParams};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, FnModule, GradCheckConfig, GradCheckReport, GradCheckable};
pub use lstm::{lstm_sequence, lstm_sequence_backward, lstm_step, LstmCache, LstmGrads, LstmParams, LstmState};
pub use ops::{linear_backward, linear_forward, mse_loss, relu, relu_backward, softmax_rows, softmax_rows_backward};
pub use params::{adam_step, glorot_uniform, AdamConfig, AdamState, Param, ParamId, ParamSet};
pub use tensor::{gemm, matmul, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
