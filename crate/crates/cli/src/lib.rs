//! Scene files, simulation and gradient-check drivers, and material
//! identification on top of the `heterodyn` solver.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod generators;
pub mod inverse;
pub mod lbfgs;
pub mod rollout;
pub mod scene;

pub use error::{CliError, Result};
