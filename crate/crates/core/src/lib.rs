//! Differentiable projective dynamics for heterogeneous tetrahedral solids.
//!
//! The forward solver alternates per-element projections with a prefactored
//! global solve, optionally coupled to frictional contact against analytic
//! obstacles. The backward pass differentiates one converged step with an
//! adjoint solve that reuses the same factor.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod backward;
pub mod contact;
pub mod error;
pub mod factor;
pub mod forward;
pub mod localstep;
pub mod material;
pub mod mesh;
pub mod oracle;
mod par;
pub mod sparse;

pub use error::{Error, Result};
pub use nalgebra::{Matrix3, Vector3};
