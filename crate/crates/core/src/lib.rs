//! Learning the cost weights of constrained optimal controllers from noisy
//! demonstrations.
//!
//! The controller minimizes `θᵀφ(V, Z)` over stacked inputs `V` subject to
//! dynamics `Z = F(V, z0)` and constraints `g(V, Z) ≤ 0`. Three estimators
//! recover `θ` from an observation `(U, x0)`: a KKT-residual relaxation and
//! two maximum-likelihood estimators solved by branch and bound over active
//! constraint sets.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demo;
pub mod error;
pub mod forward;
pub mod harness;
pub mod kkt;
pub mod likelihood;
pub mod lq;
pub mod mle;
pub mod model;
pub mod systems;
pub mod trajectory;

pub use error::{Error, Result};
