pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train_eval;

pub use error::{Error, Result};
pub use tensor::{grad_check, GradCheckReport, Tape, Tensor, TensorId};
