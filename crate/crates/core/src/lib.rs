//! Report generation with stacked x-linear attention, an attention-LSTM
//! decoder, repetition-penalized decoding, and SCST fine-tuning on a CIDEr
//! reward, plus the NLG metric suite used for evaluation.
//!
//! Everything runs on a small self-contained f64 tensor engine with
//! reverse-mode autodiff; no GPU or external numeric stack is involved.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod xlinear;

pub use tensor::{GradStore, Param, ParamBuilder, ParamId, RngState, Tape, Tensor, TensorError};
