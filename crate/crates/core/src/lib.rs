//! Distillation of a causal-attention transformer into an xLSTM student.

pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod teacher;
pub mod tensor;
pub mod xlstm;

pub use error::{Error, Result};
