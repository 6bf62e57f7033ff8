//! Dense tensors with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] that is rebuilt for every step. All kernels are generic over
//! [`Elem`] so the same model code runs in `f32` for training and in `f64`
//! for finite-difference gradient checks.

pub mod checkpoint;
mod elem;
pub mod gradcheck;
pub mod grid_sample;
pub mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use elem::Elem;
pub use gradcheck::{compare_gradients, grad_check};
pub use grid_sample::grid_sample_3d;
pub use optim::{OptimConfig, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Variance floor used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Names of every differentiable op the tape provides.
pub fn kernel_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "scale",
        "mul",
        "add_row",
        "matmul",
        "transpose",
        "reshape",
        "linear",
        "layer_norm",
        "gelu",
        "softmax",
        "concat",
        "slice",
        "mean",
        "sum",
        "mse_loss",
        "attention",
        "grid_sample_3d",
        "select_row",
    ]
}
