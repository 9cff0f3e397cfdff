//! Lattice statics of crystalline defects: lattice Green's functions, their
//! continuum kernel expansion, multipole fitting, far-field predictors and
//! defect cell-problem solvers.

pub mod analysis;
pub mod cli;
pub mod correctors;
pub mod error;
pub mod fourier;
pub mod greens;
pub mod kernels;
pub mod lattice;
pub mod multipole;
pub mod polar;
pub mod potentials;
pub mod solver;
pub mod symtensor;

pub use error::{Error, Result};
