//! Numerical toolkit for rough differential equations driven by level-3
//! geometric rough paths such as fractional Brownian motion with
//! `H > 1/4`.

pub mod cocycle;
pub mod controlled;
pub mod drivers;
pub mod error;
pub mod experiment;
pub mod field;
pub mod manifold;
pub mod problem;
pub mod sewing;
pub mod solver;
pub mod spectrum;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::SigElement;
