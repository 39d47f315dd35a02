//! Collective radiative decay of emitter arrays.
//!
//! The crate evolves N two-level emitters that share a common radiation
//! field. Three solvers are provided: an exact master-equation integrator
//! for small N, a second-order cumulant expansion in the single-emitter
//! basis, and the spin-wave cumulant equations with truncation of
//! subradiant modes, which scale to hundreds of emitters.
//!
//! Units: γ₀ = 1, lengths in λ₀, so k₀ = 2π.

pub mod collective;
pub mod config;
pub mod couplings;
pub mod cumulant2;
pub mod error;
pub mod exact;
pub mod lattice;
pub mod modes;
pub mod observables;
pub mod odeint;
pub mod scenario;

pub use num_complex::Complex64 as C64;

pub use collective::{ClosureTerm, CollectiveState, Tracked};
pub use couplings::{CouplingMatrices, Environment};
pub use error::{Error, Result};
pub use lattice::{EmitterArray, Geometry};
pub use modes::{ModeSet, MomentumIndex, Truncation};
pub use observables::ObservableSample;

pub use odeint::IntegratorConfig;

/// Wave number of the transition in units of 1/λ₀.
pub const K0: f64 = 2.0 * std::f64::consts::PI;
