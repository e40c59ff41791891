//! Real-time dynamics of spin-1/2 lattices from classical stochastic
//! trajectories of disentangling variables.
//!
//! The time-evolution operator of a quadratic spin Hamiltonian is written as
//! a noise average over products of single-site operators
//! `exp(ξ⁺S⁺) exp(ξᶻSᶻ) exp(ξ⁻S⁻)`, whose parameters obey stochastic
//! differential equations driven by Hubbard-Stratonovich fields. Quantum
//! expectation values become classical averages over trajectories.
//!
//! Plain (direct) sampling suffers from fluctuations growing exponentially in
//! time and system size. This crate implements an exact change of measure
//! that centres the sampled noise on the saddle-point trajectory of the
//! observable's effective action:
//!
//! - [`lattice`]: Ising couplings on periodic hypercubic lattices and the
//!   transform that turns real white noise into Hubbard-Stratonovich fields.
//! - [`sde`]: integrators for the disentangling variables, with a chart
//!   switch that carries trajectories through the poles of `ξ⁺`.
//! - [`saddle`]: mean-field saddle points for local observables and the
//!   recursive end-time dependent solver used for Loschmidt amplitudes.
//! - [`observables`]: classical observable functions and rate functions.
//! - [`sampling`]: deterministic parallel ensembles, importance weights and
//!   error analysis.
//! - [`ed`]: a Krylov state-vector oracle for small systems.

pub mod ed;
pub mod error;
pub mod lattice;
pub mod observables;
pub mod saddle;
pub mod sampling;
pub mod sde;
pub(crate) mod spinor;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
