//! Dense row-major tensors with a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations are methods on
//! [`Var`] handles and return `Result`, so shape errors surface at the call
//! that caused them and any non-finite value is rejected where it appears.
//!
//! ```
//! use alora_autodiff::{Param, ParamId, Tape, Tensor};
//!
//! let x = Param::new(ParamId(0), Tensor::<f64>::from_f64([3], &[1.0, -2.0, 3.0]).unwrap());
//! let tape = Tape::new();
//! let v = tape.param(&x);
//! let loss = v.mul(v).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod check;
mod error;
mod float;
mod gemm;
mod grad;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use check::{finite_diff_check, relative_error, GradCheck, REL_ERROR_FLOOR};
pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use grad::{GradientMap, Param, ParamId};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Numerically stable logistic function on a plain scalar.
pub fn sigmoid<S: Float>(x: S) -> S {
    kernels::sigmoid(x)
}
