//! Equilibrium Riccati equations for time-inconsistent linear-quadratic
//! control of forward-backward stochastic systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrix`] holds the small dense linear algebra,
//! * [`problem`] describes an instance, validates its assumptions and
//!   mollifies non-smooth weights,
//! * [`ode`] integrates the two matrix ODE families for a fixed feedback gain,
//! * [`solver`] runs the windowed Picard iteration for the equilibrium gain
//!   and evaluates the a priori bounds,
//! * [`mc`] cross-checks a solution by Monte Carlo,
//! * [`csvio`] reads and writes grid paths.

pub mod csvio;
pub mod error;
pub mod grid;
pub mod matrix;
pub mod mc;
pub mod ode;
pub mod problem;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{MatrixPath, Strategy, TimeGrid};
pub use matrix::{Mat, SymMat};
pub use problem::ProblemInstance;
