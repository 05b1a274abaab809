//! Numerical workbench for toric Kahler surfaces in symplectic (action) coordinates.
//!
//! The crate is organized around a split representation of symplectic
//! potentials `u = v + psi`: a closed-form analytic part `v` carrying the
//! boundary behaviour (Guillemin potential of a Delzant polytope, half-plane
//! model, quadratic forms, Legendre duals) and a gridded smooth correction
//! `psi`. Finite differences only ever touch `psi`, so the log singularities
//! of `v` along the polytope boundary never enter a stencil.
//!
//! Modules follow the pipeline:
//! - [`polytope`]: Delzant polytopes, half-plane model, Guillemin jets
//! - [`field`]: grids, scalar fields, split potentials, FD jets
//! - [`legendre`]: Legendre duality, moment maps, dual pairs
//! - [`calabi`]: Hessian metrics, curvature tensors, geodesics, distances
//! - [`invariants`]: affine invariants (rho, Phi, J, Theta) and the
//!   complex-side quantities (W, V, Psi, P, T, Q, K) with explicit chart tags
//! - [`abreu`]: the fourth-order scalar-curvature operator and its solver
//! - [`affine`]: normalization machinery (John/MVEE, blow-up, half-plane maps)
//! - [`verify`]: inequality checks and monitored products with noise-aware
//!   margins and vacuous-pass accounting

pub mod abreu;
pub mod affine;
pub mod calabi;
pub mod expr;
pub mod field;
pub mod invariants;
pub mod legendre;
pub mod linalg;
pub mod polytope;
pub mod verify;

pub use abreu::{
    abreu_s_f, abreu_s_u, residual, solve, AbreuError, CurvatureSpec, Residual, SolveMode,
    SolveOptions, SolveReport,
};
pub use field::{Grid, JetSample, ScalarField, SplitPotential};
pub use invariants::{Chart, InvariantReport, RicciNorm};
pub use linalg::{Mat2, Sym3, Sym4, Vec2};
pub use polytope::{DelzantPolytope, Domain};
