//! Penalized M-estimation with geometrically decomposable penalties.
//!
//! A penalty is *geometrically decomposable* when it can be written as
//! `h_A + h_I + h_{S-perp}`, a sum of support functions over bounded convex
//! sets `A` ("active") and `I` ("inactive") plus a subspace indicator. This
//! crate constructs such penalties for the lasso, group-lasso, analysis, and
//! hybrid families, solves the corresponding estimation problems, computes
//! the constants behind model-selection-consistency certificates
//! (irrepresentability, compatibility constants, restricted smoothness, the
//! admissible lambda window), checks the converse condition, and drives
//! phase-transition experiments at desk scale.

pub mod error;
pub mod geometry;
pub mod loss;
pub mod penalty;
pub mod solver;

pub use error::{GdError, Result};
