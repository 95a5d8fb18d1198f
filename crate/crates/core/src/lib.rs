//! Numerical laboratory for backward stochastic Volterra integral equations (BSVIEs)
//!
//! The equations solved here have the form
//!
//! ```text
//! Y(t) = psi(t) + INT_t^T g(t, s, Y(s), Z(t,s), Z(s,t)) ds - INT_t^T Z(t,s) dW(s),
//! ```
//!
//! where the driver `g` may read the two-parameter integrand `Z` both at `(t,s)` ("this row")
//! and at `(s,t)` ("the mirrored row"). Everything is discretised on a time grid and a Monte
//! Carlo ensemble of Brownian paths; conditional expectations are computed by global
//! least-squares regression on per-slice polynomial bases (Longstaff-Schwartz style).
//!
//! Module map:
//!
//! * [`model`] - grids, path ensembles, one/two-parameter process tables, drivers, free terms,
//!   weight profiles and concavity moduli.
//! * [`paths`] - seeded Brownian path generation and adaptedness checks.
//! * [`regression`] - per-slice regression bases, conditional-expectation projection,
//!   martingale integrand extraction and the nested Monte Carlo oracle.
//! * [`simple_bsvie`] - the driver-frozen ("simple") equation solved through a parameterised
//!   family of backward equations, plus the martingale extension of `Z` to the lower triangle.
//! * [`lipschitz`] - the fixed-point solver for Lipschitz drivers (freeze, solve, extend),
//!   weighted norms and the two-solution stability gap.
//! * [`picard`] - the outer Picard iteration for drivers that are only log-Lipschitz in `y`,
//!   with concavity, Bihari and Gronwall monitors.
//! * [`diagnostics`] - equation residuals, a-priori estimate checks and verification reports.
//! * [`scenario`] - JSON scenario configs, bundled scenarios, the runner and CSV/JSON outputs.

// The numeric kernels favor index-driven loops because one index usually
// addresses several tables at once (weights, slices, per-path buffers).
#![allow(clippy::needless_range_loop)]

pub mod diagnostics;
pub mod error;
pub mod lipschitz;
pub mod model;
pub mod paths;
pub mod picard;
pub mod regression;
pub mod scenario;
pub mod simple_bsvie;

pub use error::{Error, Result};
