//! Finite-element solvers for Westervelt-type equations with nonlinear strong damping.

pub mod constants;
pub mod energy;
pub mod error;
pub mod fem;
pub mod manufactured;
pub mod material;
pub mod mesh;
pub mod model;
pub mod quadrature;
pub mod scenario;
pub mod sparse;
pub mod stepper;
pub mod svg;

pub use error::{Error, Result};
