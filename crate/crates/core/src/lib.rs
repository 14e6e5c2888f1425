//! Distributed deep Koopman learning for nonlinear time-varying systems.
//!
//! A network of agents, each observing a linear projection of the plant state,
//! learns a shared lifted linear model `(A, B, H)` together with per-agent neural
//! observables. Every numeric type is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`.

pub mod batching;
pub mod consensus;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod net;
pub mod network;
pub mod regression;
pub mod scalar;
pub mod systems;

pub use error::{DdklError, Result};
pub use scalar::Real;

/// Dense `f64` matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense `f64` column vector.
pub type Vector = nalgebra::DVector<f64>;
