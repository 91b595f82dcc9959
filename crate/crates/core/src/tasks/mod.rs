//! Built-in problems and data handling.

pub mod data;
pub mod toy;
