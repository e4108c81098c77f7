//! Desk-scale numerical laboratory for the parabolic Dirichlet problem above
//! Lip(1,1/2) graphs.
//!
//! The crate implements the full experimental chain relating solvability of
//! the Dirichlet problem for `∂_t - div(A∇)` above a parabolic Lipschitz
//! graph to quantitative rectifiability of the graph:
//!
//! * [`geometry`] — parabolic metric and quasinorm, dyadic cubes, Whitney
//!   regions, corkscrews, space-time parabolas, structural constants;
//! * [`graph`] — Lip(1,1/2) graph generators, beta numbers and Carleson
//!   packing norms, surface measure;
//! * [`analysis`] — parabolic Fourier multipliers (fractional integral,
//!   half-order time derivatives), localized kernels, approximate
//!   identities, regularized distances, Littlewood-Paley families, BMO and
//!   John-Stromberg estimators;
//! * [`pde`] — implicit finite-difference solver for the flattened
//!   divergence-form equation, Green functions, parabolic measure,
//!   A-infinity / reverse-Hoelder diagnostics, boundary-estimate reports;
//! * [`coeffs`] — coefficient smoothing at a regularized boundary distance
//!   and elliptic matrix algebra;
//! * [`corona`] — measure-driven corona decompositions, Green nondegeneracy
//!   refinement, sawtooth cutoffs, square-function and integration-by-parts
//!   reports;
//! * [`levelset`] — stopping distances, level-set graphs, the smoothed
//!   family, and regularity verdicts for the approximating graphs;
//! * [`scenario`] — deterministic end-to-end pipelines and report emission.
//!
//! Every run is deterministic given its seed. Run `cargo run --example
//! full_pipeline` for the end-to-end demonstration, or see the `examples/`
//! directory for one runnable example per capability.

pub mod analysis;
pub mod coeffs;
pub mod corona;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod grid;
pub mod io;
pub mod levelset;
pub mod pde;
pub mod scenario;

pub use error::{Error, Result};
