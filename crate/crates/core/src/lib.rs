//! Numerical laboratory for high-contrast (double-porosity) diffusion.

pub mod cell_problems;
pub mod dirichlet_modes;
pub mod error;
pub mod fine_grid;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod io;
pub mod limit_system;
pub mod linalg;
pub mod projection;
pub mod spectrum;

pub use error::{Error, Result};
