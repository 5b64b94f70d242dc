//! Minimal reverse-mode differentiable computation core.

pub mod nn;
pub mod tape;
pub mod tensor;

pub use nn::{
    grad_check, load_checkpoint, save_checkpoint, Adam, BoundParams, GradCheckReport, Linear,
    LstmCell, MultiHeadAttention, ParamSet, Parameter,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
