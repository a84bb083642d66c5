//! Reverse-mode differentiation over dense real `f64` tensors.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! walks the record in exact reverse. Complex quantities are carried as
//! separate real and imaginary parts by the caller.
//!
//! ```
//! use ngso_beamform::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

mod broadcast;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use tape::{Gradients, OpKind, Tape, Var, SELU_ALPHA, SELU_LAMBDA};
pub use tensor::Tensor;
