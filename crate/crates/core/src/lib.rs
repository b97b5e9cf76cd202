//! Mesh-informed neural networks: sparse layers between finite-element nodal spaces,
//! ground-truth generators for four benchmark operators, and a Monte Carlo study of
//! tissue hypoxia on random vascular networks.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod mesh;
pub mod randfield;
pub mod nn;
pub mod operators;
pub mod sparsity;
pub mod train;
pub mod vascular;

pub use error::{Error, Result};
