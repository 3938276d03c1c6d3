//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Every differentiable quantity in the motion pipeline (decoder outputs,
//! posterior estimates, guidance losses) is computed on a [`Tape`]. The tape is
//! rebuilt for each evaluation; [`Tape::backward`] then returns gradients for
//! any recorded inputs.
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let g = tape.backward(y, &[x]).unwrap();
//! assert_eq!(g[0].item(), 6.0);
//! ```
//!
//! Broadcasting is limited to scalar-with-tensor; row/column repetition is
//! expressed as a matmul against a ones vector ([`Tape::repeat_rows`]).

mod backward;
#[cfg(any(test, feature = "fdcheck"))]
pub mod fdcheck;
mod tape;
mod tensor;

pub use tape::{Tape, Var, ACOS_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("variable is not recorded on this tape")]
    NotOnTape,
}
