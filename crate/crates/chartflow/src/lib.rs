//! Chart-based solver for the incompressible Navier-Stokes equation on flat
//! compact manifolds (periodic tori covered by overlapping charts).
//!
//! The pieces, bottom up:
//!
//! * [`geometry`] - charts, metrics, operator coefficients, the atlas and its
//!   partition of unity;
//! * [`grid`] - discrete calculus on per-chart tensor grids and overlap
//!   transfer;
//! * [`elliptic`] - per-chart Dirichlet Poisson solves (the pressure) plus an
//!   explicit Green-matrix path for cross-validation;
//! * [`parabolic`] - Gaussian fundamental solutions, the Levy parametrix, and
//!   the implicit-Euler linear parabolic stepper;
//! * [`leray`] - the pressure source functional S and its interior/coupling
//!   decomposition, the sole inter-chart communication channel;
//! * [`scheme`] - the controlled global scheme: p-subiteration, m-coupling
//!   iteration, time-rescaled stepping, and growth-control functions;
//! * [`config`] / [`cli`] - run configuration, orchestration, and diagnostics
//!   serialization.

pub mod cli;
pub mod config;
pub mod elliptic;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod leray;
pub mod linalg;
pub mod parabolic;
pub mod scheme;

pub use error::{Error, Result};
