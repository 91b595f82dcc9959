//! Differentiable architecture search over small DAG cells.
//!
//! Architecture choices on every edge of a cell are relaxed to a softmax
//! mixture of candidate ops. The logits `α` are trained on validation loss
//! through a one-step unrolled approximation of the inner weight
//! optimization, then discretized into a [`cell::Genotype`].
//!
//! ```
//! use cellnas_core::config::{SearchConfig, SearchMode};
//! use cellnas_core::search::{search, Task};
//!
//! let cfg = SearchConfig { mode: SearchMode::SecondOrder, ..SearchConfig::toy() };
//! let traj = search(&cfg, &Task::from_config(&cfg).unwrap()).unwrap();
//! assert!((traj.final_alpha[0] - 1.0).abs() < 1e-3);
//! ```

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod bilevel;
pub mod cell;
pub mod config;
mod error;
pub mod fidelity;
pub mod network;
pub mod ops;
pub mod optim;
pub mod search;
pub mod space;
pub mod tasks;

pub use error::{NasError, Result};
