//! Dense `f64` tensors, reverse-mode autodiff, Adam, finite-difference
//! gradient checking and the checkpoint container.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{filled_tensor, normal_tensor, ParamBuilder, ParamId, ParameterSet};
pub use tape::{gelu, sigmoid, Gradients, Tape, Var, MASKED_LOGIT};
pub use tensor::Tensor;
