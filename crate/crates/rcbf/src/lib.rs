//! Uncertainty-estimator-based robust control barrier functions.
//!
//! - [`dynamics`]: control-affine models, the uncertain plant, RK4 simulation.
//! - [`estimator`]: the uncertainty estimator and its error/output bounds.
//! - [`qp`]: a small dense dual active-set QP solver.
//! - [`filters`]: barrier, high-order barrier and CLF rows for the safety filters.
//! - [`scenarios`]: adaptive cruise control and multirotor obstacle avoidance.
//! - [`harness`]: configuration, batch runs, trace and summary files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::result_large_err)]

pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod filters;
pub mod harness;
pub mod qp;
pub mod scenarios;

pub use error::{Error, Result};
