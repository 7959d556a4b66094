//! Random-effects panel models with specification diagnostics.
//!
//! The crate fits the linear mixed model y = X beta + Z eta + eps for
//! panel data (fixed-effects and GLS random-effects estimators, REML or
//! Swamy-Arora variance components) and provides two complementary
//! checks of the random-effects assumptions:
//!
//! * the classical Hausman FE-vs-RE test and its Mundlak-Wooldridge
//!   CRE variant ([`spectests`]);
//! * a parameter-specific internal bias estimate nu_k' eta_hat with
//!   block-preserving permutation p-values, computable from a single
//!   fitted model, native or imported ([`bias`]).

pub mod bias;
pub mod data;
pub mod design;
pub mod error;
pub mod estimators;
pub mod external;
pub mod gls;
pub mod report;
pub mod simulate;
pub mod sparse;
pub mod spectests;
pub mod svg;
pub mod variance;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
