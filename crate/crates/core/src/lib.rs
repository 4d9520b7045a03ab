//! Spatial missing-data imputation and two-level CAR modelling for facilities
//! nested in areal units.
//!
//! The pipeline has two stages:
//!
//! 1. [`ssm`]: each covariate is laid out along distance from a reference
//!    centroid ([`geo`]) and treated as a local-level state-space series;
//!    missing cells are filled with Kalman-smoothed levels. [`bench`] scores
//!    this imputer against simple baselines by masked cross-validation.
//! 2. [`car`]: the completed covariates feed a Gaussian two-level model with a
//!    Leroux CAR random effect per area over the augmented adjacency graph of
//!    [`graph`], fitted by Gibbs/Metropolis MCMC. [`report`] computes the
//!    relative squared error and per-area aggregates.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod car;
pub mod data;
pub mod error;
pub mod geo;
pub mod graph;
pub mod impute;
pub mod optim;
pub mod report;
pub mod simulate;
pub mod ssm;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
