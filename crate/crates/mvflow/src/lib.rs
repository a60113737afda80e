//! Simulation and numerical verification of interacting stochastic flows on
//! embedded manifolds: particle systems whose drift and diffusion depend on
//! the evolving empirical measure, the intrinsic (Wasserstein) derivative
//! calculus attached to them, and chaos-kernel estimation for functionals of
//! the measure-valued process.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] — built-in manifolds via explicit embeddings;
//! * [`measure`] — finite-support measures with exact Wasserstein-2 distance;
//! * [`fields`] — measure-dependent vector fields with analytic derivatives;
//! * [`noise`] / [`rng`] — reproducible counter-based Brownian drivers;
//! * [`solver`] — the coupled particle solver, Picard iteration, stability
//!   and convergence studies;
//! * [`functionals`] / [`calculus`] — measure functionals, perturbation
//!   flows, variational and Malliavin flows, derivative identities;
//! * [`chaos`] — semigroup and chaos-kernel estimators with diagnostics;
//! * [`config`] / [`harness`] — experiment configs, orchestration, records.

pub mod calculus;
pub mod chaos;
pub mod config;
pub mod error;
pub mod fields;
pub mod functionals;
pub mod geometry;
pub mod harness;
pub mod measure;
pub mod noise;
pub mod rng;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
pub use geometry::Manifold;
pub use measure::EmpiricalMeasure;

/// Ambient vector (points, tangent vectors).
pub type Vector = nalgebra::DVector<f64>;
/// Ambient matrix (projectors, Jacobians, Malliavin columns).
pub type Matrix = nalgebra::DMatrix<f64>;

/// Build a `Vector` from a slice.
pub fn vec_from(coords: &[f64]) -> Vector {
    Vector::from_column_slice(coords)
}
