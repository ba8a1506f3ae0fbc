//! Logistic knowledge tracing with spacing and comparison-count features.
//!
//! Trial logs are ingested into per-student streams ([`data`]), models are
//! written in a small `feature(component)` grammar ([`dsl`]), feature
//! columns are computed causally per student ([`features`]), and models are
//! fitted by nested maximum likelihood ([`estimator`], [`search`]).
//! [`evaluation`] runs student-stratified cross-validation and
//! [`simulator`] generates category-learning data from a known learner.

pub mod data;
pub mod dsl;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod features;
pub mod search;
pub mod simulator;

pub use error::{Error, Result};
