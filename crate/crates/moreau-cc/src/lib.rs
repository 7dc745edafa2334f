//! Inner Moreau-envelope regularization of conic chance constraints.
//!
//! A probability function φ(x) = P(Φ(x, ξ) ∈ −K) is rewritten through a
//! scalarized supremum function S(x, z) as φ(x) = P(S(x, ξ) ≤ h(x)), then
//! regularized from the inside by replacing S with its Moreau envelope M_λS.
//! This crate provides:
//!
//! - [`envelope`]: Moreau envelopes, proximal points, and envelope gradients
//!   for convex functions, with a catalog of closed-form proximal maps;
//! - [`systems`]: the scalarized constraint systems (joint, semidefinite,
//!   probust) and their supremum functions;
//! - [`spherical`]: spherical-radial decomposition of zero-mean Gaussians —
//!   direction sampling, the chi radial law, radial root solves, and the
//!   probability estimator for φ and φ_λ;
//! - [`gradient`]: the per-direction gradient mapping and the sample-average
//!   gradient of φ_λ;
//! - [`solver`]: the regularized problems (P_λ) and the λ-continuation loop;
//! - [`oracle`]: independent brute-force validators (direct Monte Carlo,
//!   closed-form references, finite differences);
//! - [`registry`]: the built-in example catalog used by tests and the CLI.

pub mod envelope;
pub(crate) mod eigen;
pub mod registry;
pub mod gradient;
pub mod oracle;
pub mod spherical;
pub mod systems;
pub(crate) mod linalg;

pub use envelope::{ConvexFunction, EnvelopeError, EnvelopeResult, ProxKind};
