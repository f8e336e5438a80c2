//! Numerical laboratory for gradient descent on deep scalar factorisation
//! `ℓ(θ) = ½(θ₁⋯θ_p − y)²` at and beyond the edge of stability.
//!
//! The crate is organised bottom-up:
//!
//! - [`problem`]: the factorisation instance and exact derivatives of `f` and `ℓ`.
//! - [`oracle`]: central finite differences used to cross-check those derivatives.
//! - [`manifold`]: KKT projection onto the solution manifold `M = f⁻¹{y}`,
//!   tubular-neighbourhood coordinates and the Riemannian calculus of the
//!   sharpness `λ = ‖∇f‖²` along `M`.
//! - [`dynamics`]: the gradient descent engine, the reference normal-form maps
//!   and regime classification.
//! - [`analysis`]: rate fits, period-two detection and per-step theorem checks.

// `!(x > 0.0)` is used deliberately so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
mod error;
pub mod manifold;
pub mod oracle;
pub mod problem;

pub use error::{Error, Result};
pub use problem::{FactorisationProblem, OnManifoldPoint, Point};
