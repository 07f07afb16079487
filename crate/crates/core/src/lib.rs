//! Numerical simulator for local-phonon dynamics in linear trapped-ion chains.
//!
//! The crate covers the full path from trap parameters to measured
//! populations: equilibrium geometry and hopping rates ([`chain`]), the
//! truncated spin ⊗ Fock state space ([`hilbert`]), rotating-frame
//! Hamiltonians with Jaynes–Cummings / anti-JC blockade drives
//! ([`hamiltonian`]), unitary and Lindblad propagation ([`dynamics`]), laser
//! pulses and composite pulses ([`pulses`]), readout emulation and Rabi-curve
//! fitting ([`detection`]), and end-to-end experiment pipelines
//! ([`scenarios`]).
//!
//! Units: frequencies in configuration files are ordinary frequencies (Hz);
//! everything inside the simulator is angular (rad/s) with ħ = 1. Times are in
//! seconds.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod constants;
pub mod detection;
pub mod dynamics;
mod error;
pub mod hamiltonian;
pub mod hilbert;
pub mod pulses;
pub mod scenarios;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = nalgebra::Complex<f64>;
