//! Global-optimality certification for landmark-based SLAM.
//!
//! The pipeline: build a [`graph::MeasurementGraph`], assemble the marginalized data
//! matrix as a [`datamatrix::DataMatrixOperator`], optimize with
//! [`solver::gauss_newton`], then test the candidate with [`certificate::certify`].

pub mod certificate;
pub mod cholesky;
pub mod datamatrix;
pub mod error;
pub mod graph;
pub mod lanczos;
pub mod sim;
pub mod so3;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
