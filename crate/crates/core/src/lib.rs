//! Radiative transport on a discrete-ordinates phase-space grid, with the
//! time-reversal reconstruction of initial conditions from outflow data and
//! the minimum-norm boundary control built on the same operators.
//!
//! The discretization is first-order upwind in space and explicit Euler in
//! time. Every linear map (evolution, measurement, time reversal, steering)
//! carries an exact discrete transpose so that normal equations, power
//! iterations and duality checks hold to round-off.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod evolution;
pub mod experiment;
pub mod io;
pub mod krylov;
pub mod medium;
pub mod phase_grid;
pub mod stationary;
pub mod timereversal;

pub use error::{Error, Result};
pub use medium::{Kernel, KernelKind, Medium, RegimeReport};
pub use phase_grid::{
    BoundaryTrace, Field, Geometry, GeometryConfig, PhaseSpaceGrid, TracePart, Upwind,
};
