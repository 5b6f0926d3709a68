//! Regularized equilibria for time-inconsistent mean field games in one
//! space dimension.
//!
//! The building blocks are:
//!
//! - [`model`]: coefficient functions, the built-in catalog and a sampling
//!   audit of the standing assumptions;
//! - [`grid`]: uniform time/space/action grids and the triangular
//!   `(t, s)` storage used for the auxiliary value `V(t, s, x)`;
//! - [`gibbs`]: the Gibbs best response, Shannon entropy and the soft-max
//!   log-partition;
//! - [`value_pde`]: the backward linear PDE solved for every initial time `t`;
//! - [`measure_flow`]: the conservative Fokker-Planck solver and 1-D
//!   Wasserstein distances;
//! - [`mc_oracle`]: an Euler-Maruyama particle oracle with counter-based
//!   per-particle random streams;
//! - [`pia`]: the fixed-point map, the policy iteration loop and the
//!   vanishing-entropy continuation;
//! - [`verify`]: residuals, consistency gaps, deviation gains and
//!   lemma-level diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod commands;
pub mod config;
pub mod error;
pub mod fields;
pub mod gibbs;
pub mod grid;
pub mod mc_oracle;
pub mod measure_flow;
pub mod model;
pub mod output;
pub mod pia;
pub mod selftest;
pub mod value_pde;
pub mod verify;

mod linalg;

pub use error::{Error, Result};
pub use gibbs::{ActionDensity, RelaxedPolicyField};
pub use grid::{GridConfig, GridSpec, TriangularField};
pub use measure_flow::{InitialLaw, MeasureFlow};
pub use model::{MeasureStats, ModelSpec};
pub use pia::{ConvergenceReport, PiaOptions, PiaOutcome, PiaState};
pub use value_pde::AuxValueField;
