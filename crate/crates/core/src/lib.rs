//! Outer Löwner-John ellipsoids of ellipsoid intersections, computed
//! centrally and tracked distributedly over an undirected network, plus a
//! distributed Kalman filter whose covariance fusion rides on the tracked
//! ellipsoid.
//!
//! Layering, bottom up:
//! - [`psd`]: symmetric matrices and positive-definite primitives.
//! - [`objective`]: ellipsoid-size objectives on simplex combinations of atoms.
//! - [`simplex`]: the simplex-constrained solver and its brute-force oracle.
//! - [`lowner_john`]: the centralized program and the node-local step.
//! - [`network`]: graphs, input trajectories and the synchronous simulator.
//! - [`dkf`]: the distributed Kalman filter and its two baselines.
//! - [`experiments`]: JSON configs, CSV output and the experiment runner.

pub mod dkf;
pub mod error;
pub mod experiments;
pub mod lowner_john;
pub mod network;
pub mod objective;
pub mod psd;
pub mod simplex;

pub use error::{Error, Result};
pub use objective::{AtomSet, Objective, ObjectiveKind};
pub use psd::{PsdTolerance, SymMat};
pub use simplex::{SolverConfig, WeightVector};
