//! Recovery of social interaction networks and effect parameters from panel data.
//!
//! The model is `y_t = rho W y_t + x_t beta + W x_t gamma + shocks`, where the
//! interaction matrix `W` is unknown.  The crate provides the model algebra
//! (reduced forms, assumption checks, panel transforms), exact identification
//! routines, a penalized GMM estimator with data-driven penalty selection, a
//! simulation harness for recovery experiments, and counterfactual shock
//! propagation.

pub mod campaign;
pub mod counterfactual;
pub mod covariates;
pub mod eigen;
pub mod error;
pub mod estimator;
pub mod generators;
pub mod gmm;
pub mod invert;
pub mod lasso;
pub mod lbfgs;
pub mod netstats;
pub mod network;
pub mod ols;
pub mod panel;
pub mod params;
pub mod reduced;
pub mod rng;
pub mod simulate;
pub mod swarm;
pub mod twosls;
pub mod wald;

pub use error::{Error, Result};

/// Entries with absolute value at or below this are treated as structural zeros
/// everywhere a sparsity decision is made (support counts, recovery rates,
/// reachability checks).  Functions that classify zeros accept an explicit
/// tolerance; this is the default they share.
pub const DEFAULT_ZERO_TOL: f64 = 1e-10;
