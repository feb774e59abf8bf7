//! Verification toolkit for pseudocalibrated Sum-of-Squares moment matrices
//! on sampled random graphs, specialized to the densest-k-subgraph planted
//! distribution.
//!
//! The crate is organized bottom-up:
//!
//! - [`params`] / [`graph`] / [`fourier`]: problem parameters, seeded G(n,p)
//!   sampling, p-biased Fourier characters, and the coefficient-atom ledger.
//! - [`shapes`]: ribbons, shapes, canonical forms, composition, intersection
//!   patterns, linearization, and shape enumeration.
//! - [`separators`]: exact (in β) separator weights, minimum-weight vertex
//!   separators, left/middle/right classification, ribbon decomposition.
//! - [`gmatrix`]: realized graph matrices on small instances, spectral norms,
//!   norm-bound envelopes, the combinatorial basis, density audits, and the
//!   conditioning expansion.
//! - [`pseudocal`]: the candidate moment matrix (M and Λ views), planted
//!   coefficients, pE[1], constraint sums, PSD checks, and left-matrix
//!   conditioning.
//! - [`pmvs`]: the positive-minimum-vertex-separator decomposition engine and
//!   its one-round matrix identities.
//! - [`slack`]: exact rational slack accounting, the per-step slack
//!   inequalities, c-functions, and the parameter assumption ledger.

pub mod fourier;
pub mod gmatrix;
pub mod graph;
pub mod params;
pub mod pmvs;
pub mod pseudocal;
pub mod separators;
pub mod shapes;
pub mod slack;

pub use params::{make_params, ParamSpec, Params};
