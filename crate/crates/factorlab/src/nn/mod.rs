//! Minimal reverse-mode differentiation engine for small feed-forward
//! networks. Everything is `f64`, layouts are row-major with a leading batch
//! dimension, and every operation is deterministic given its inputs (dropout
//! draws from an explicitly passed generator).

mod check;
mod layers;
mod loss;
mod net;
mod schedule;
mod tensor;

pub use check::{grad_check, grad_check_with, relative_error, CheckError};
pub use layers::LayerSpec;
pub use loss::{batch_softmax_cross_entropy, softmax_cross_entropy, LossError};
pub use net::{NetError, Network, Param, ParamSet, Tape};
pub use schedule::{lr_schedule, ScheduleError};
pub use tensor::{Tensor, TensorError};
