//! Pathwise gradient estimators with control variates for stochastic
//! variational inference.
//!
//! The crate is organised bottom-up:
//! - [`autodiff`]: reverse-mode tape and the [`autodiff::Real`] scalar trait;
//! - [`families`]: mean-field, rank-5 and real NVP variational families;
//! - [`models`]: log-joint densities and dataset loaders;
//! - [`cv`]: gradient batches, zero-variance and quadratic control variates,
//!   coefficient solvers;
//! - [`eval`]: ELBO, variance-ratio and test-lppd protocols;
//! - [`runner`]: Adam loop, configuration, traces and checkpoints.

pub mod autodiff;
pub mod cv;
pub mod error;
pub mod eval;
pub mod families;
mod linalg;
pub mod models;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
