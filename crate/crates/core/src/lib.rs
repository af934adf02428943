//! Proximal shuffling gradient methods for finite-sum convex optimization.
//!
//! Each epoch visits every component once in a permuted order with plain
//! (sub)gradient steps, then applies a single proximal step with parameter
//! `n * eta_k`. The crate bundles problem generators, closed-form proximal
//! operators, permutation regimes, theorem-driven stepsize schedules, the
//! epoch loop with per-epoch diagnostics, and analysis oracles.

pub mod analysis;
pub mod descriptor;
pub mod error;
pub mod harness;
pub mod io;
pub mod optimizer;
pub mod permutation;
pub mod problem;
pub mod prox;
pub mod schedule;

pub use error::{Error, Result};

/// Dense iterate / gradient vector.
pub type Vector = nalgebra::DVector<f64>;
