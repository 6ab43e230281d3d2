//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; each operation records a backward closure and
//! [`Tape::backward`] replays them in reverse. Convolutions lower to
//! im2col + GEMM, so every layer type shares one verified gradient path.

mod error;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{check_gradients, finite_diff_grad, GradCheckReport};
pub use ops::{softmax_slice, BatchStats, Conv2dSpec, GeluKind, RunningStats, NORM_EPS};
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
