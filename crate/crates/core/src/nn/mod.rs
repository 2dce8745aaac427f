//! Minimal reverse-mode differentiable operator set: convolution, batch
//! norm, ReLU, pooling, transposed convolution, softmax and cross-entropy.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_nonsmooth, grad_check_sampled, relative_error, GradCheckReport};
pub use tape::{BnMode, BnParams, Gradients, RunningStats, Tape, Var, PROB_FLOOR};
pub use tensor::{Precision, Scalar, Tensor};
