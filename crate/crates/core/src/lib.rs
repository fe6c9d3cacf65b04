//! Explicit and effectively symmetric Runge–Kutta solvers for rough and
//! stochastic differential equations, with reversible backpropagation.

mod error;

pub mod drivers;
pub mod experiments;
pub mod neuralnet;
pub mod par;
pub mod revgrad;
pub mod solvers;
pub mod stability;
pub mod tableau;
pub mod trees;

pub use error::{Error, Result};
