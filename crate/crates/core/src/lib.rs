//! Linear-quadratic-Gaussian control and major-minor mean-field games:
//! Riccati solvers, consistency fixed points, population simulation and
//! epsilon-Nash gap measurement.

pub mod error;
pub mod lqg;
pub mod mfg_model;
pub mod mfg_solver;
pub mod nash;
pub mod moments;
pub mod numerics;
pub mod par;
pub mod population;
pub mod riccati;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::{GridFunction, Mat, TimeGrid};
