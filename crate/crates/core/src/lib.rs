//! Counterfactual simulation of user behavior.
//!
//! The pipeline: learn a [`graph::CausalGraph`] from prior knowledge and data
//! ([`discovery`]), fit categorical mechanisms ([`scm`]), train a causally
//! conditioned sequence model ([`model`]) and answer `do(...)` queries with
//! [`simulate`]. [`eval`] scores the results.

pub mod comparison;
pub mod data;
pub mod discovery;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod scm;
pub mod simulate;

pub use error::{Error, Result};
