//! Numerical laboratory for periodic homogenization of quasilinear parabolic
//! systems with highly oscillating coefficients.
//!
//! The crate solves, at desk scale, the full chain connecting an oscillatory
//! system of quasilinear parabolic PDEs to its effective (homogenized) limit:
//!
//! 1. frozen-parameter cell problems on the unit torus — the invariant density
//!    `p(·, y)` of the fast diffusion and the correctors `b̂(·, y)`, `ê(·, y)`
//!    ([`cell`]),
//! 2. effective coefficients `ᾱ(y)`, `ū(y, z)`, `v̄(y, z)` obtained by
//!    averaging corrector-dressed integrands against `p` ([`homog`]),
//! 3. backward-in-time solves of the oscillatory, limit and regularized
//!    systems by a Fourier pseudo-spectral method of lines ([`pde`]),
//! 4. a seeded Monte Carlo layer that transports the PDE solves into
//!    forward-backward SDE paths and measures every convergence statistic of
//!    interest, including the auxiliary-SDE construction with a
//!    density-ratio-weighted diffusion ([`fbsde`]),
//! 5. an experiment harness with a declarative config, a content-addressed
//!    binary cache and machine-readable reports ([`harness`]).
//!
//! Coefficients are declarative expression trees ([`expr`], [`coeffs`]) so a
//! config file fully determines a run.

pub mod cell;
pub mod coeffs;
pub mod error;
pub mod expr;

pub mod fbsde;
pub mod harness;
pub mod homog;
pub mod pde;
pub mod torus;

pub use error::{HomError, Result};
