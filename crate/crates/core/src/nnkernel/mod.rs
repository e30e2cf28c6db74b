//! Dense-network numerical core: matrices, layers, reparameterised sampling,
//! Adam and finite-difference gradient checking.

pub mod gradcheck;
mod layers;
mod matrix;
mod optim;
mod rng;

pub use layers::{
    dropout, sample_gaussian, sigmoid, softplus, Activation, BatchNorm, BatchNormCache, Dense,
    DenseOut, Param,
};
pub use matrix::{log_softmax_rows, softmax_backward, softmax_in_place, softmax_rows, Matrix};
pub use optim::{adam_step, AdamConfig};
pub use rng::RngStream;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("batch of {0} rows is too small for training-mode batch normalization")]
    BatchTooSmall(usize),
    #[error("backward called before forward")]
    CalledBeforeForward,
}
