//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! ```
//! use cellnas_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, -2.0]).unwrap());
//! let loss = w.mul(&w).unwrap().sum().unwrap();
//! tape.backward(&loss).unwrap();
//! assert_eq!(w.grad().unwrap().data(), &[2.0, -4.0]);
//! ```
//!
//! Everything is double precision. Elementwise primitives accept equal
//! shapes or a rank-0 scalar paired with any shape; there is no other
//! broadcasting. See [`Primitive`] for the per-kind shape rules.

pub mod check;
mod error;
mod primitive;
mod tape;
mod tensor;

pub use error::TensorError;
pub use primitive::Primitive;
pub use tape::{Tape, Value};
pub use tensor::Tensor;
