//! Pseudo-spectral laboratory for 2D incompressible flow in vorticity form on
//! the torus `[0, 2*pi)^2`.
//!
//! The crate provides:
//! - band-limited scalar fields with exact-coefficient spectral calculus ([`field`]),
//! - the Biot-Savart law mapping vorticity to a divergence-free velocity ([`biot_savart`]),
//! - mollification by smooth approximate identities ([`mollifier`]),
//! - viscous/inviscid nonlinear solvers and frozen-velocity linear solvers
//!   built on an integrating-factor Runge-Kutta scheme ([`evolution`]),
//! - reproducible initial data and forcing families ([`initial_data`]),
//! - norm, balance, and renormalization diagnostics ([`diagnostics`]),
//! - a vanishing-viscosity experiment harness with a CLI ([`harness`]).

pub mod biot_savart;
pub mod diagnostics;
pub mod evolution;
pub mod field;
mod fft;
pub mod harness;
pub mod initial_data;
pub mod mollifier;
pub mod snapshot;

pub use biot_savart::{velocity_from_vorticity, VelocityField};
pub use diagnostics::{lp_norm, pair_distance, DiagnosticsRecord, Renormalizer, TestFunction};
pub use evolution::{solve, ForcingSpec, SolveMode, SolverConfig, Trajectory};
pub use field::{PhysicalField, SpectralField, TorusGrid};
pub use initial_data::{build_initial, InitialDataSpec, PerturbationFamily};
pub use harness::{cli_main, run_viscosity_sweep, ExperimentConfig};
pub use mollifier::{make_kernel, mollify, MollifierKernel, MollifierProfile};
