//! Stochastic optimal control toolkit for continuously monitored quantum
//! systems under measurement-based feedback.
//!
//! The crate is organized in layers:
//!
//! * [`qstate`] — density matrices, observables, parametrized observable
//!   frames, spectral decompositions.
//! * [`sde`] — Euler–Maruyama integration of the stochastic master equation
//!   with deterministic, stream-indexed noise.
//! * [`control`] — control vectors, admissible regions, and protocols
//!   (constant, time-switching, state feedback).
//! * [`cost`] — running/terminal cost specifications, pathwise costs,
//!   Monte-Carlo cost-to-go estimation, and queryable cost fields.
//! * [`hjb`] — the Hamilton–Jacobi–Bellman machinery: the G function,
//!   its maximization over a control region, residuals, and the classic
//!   four-step verification of candidate optimal protocols.
//! * [`viscosity`] — one-sided jets for piecewise-smooth candidate value
//!   functions and the enhanced (viscosity-solution) verification that
//!   remains decisive at kinks.
//! * [`dp`] — backward dynamic-programming solvers on dense grids for the
//!   relaxed HJB equation and for time-optimal (first-passage) problems.
//! * [`qutrit`] — the worked three-level feedback example: good-control
//!   eigenvalue dynamics, the two-regime closed-form cost, switching
//!   protocol, and end-to-end verification.

pub mod control;
pub mod cost;
pub mod dp;
pub mod error;
pub mod grid;
pub mod hjb;
pub mod optim;
pub mod qstate;
pub mod qutrit;
pub mod sde;
pub mod viscosity;

pub use error::{Error, Result};

// The public API exposes nalgebra matrix types (dynamics diffusion blocks,
// Hessians) and complex scalars; re-exporting the crates lets downstream
// users name those types without pinning their own copies to matching
// versions.
pub use nalgebra;
pub use num_complex;
