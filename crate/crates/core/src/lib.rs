//! Reward-free OLIVE on exactly solvable layered MDPs.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: layered MDPs, policies, sampling and exact dynamic programming.
//! - [`funclass`]: value-function classes, covers and assumption checkers.
//! - [`bellman`]: exact and empirical average Bellman errors, surrogates.
//! - [`olive`]: the OLIVE elimination loop (exact or sampled).
//! - [`rfolive`]: the two-phase reward-free algorithm.
//! - [`dimensions`]: Eluder-style dimensions and Bellman-rank checks.
//! - [`fixtures`]: counterexamples, hardness family and instance generators.

pub mod bellman;
pub mod dimensions;
pub mod error;
pub mod fixtures;
pub mod funclass;
mod linalg;
pub mod mdp;
pub mod olive;
pub mod rfolive;
pub mod rng;

pub use error::{Error, Result};
