//! Conditional matrix normalizing flows for sparse Gaussian graphical models.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod eval;
pub mod flow;
pub mod linalg;
pub mod parallel;
pub mod target;
pub mod train;
