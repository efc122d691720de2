//! Simulation and verification toolkit for the viscous dyadic shell model.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod steady;
pub mod verify;

pub use error::{Error, Result};
