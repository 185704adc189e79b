//! Additively preconditioned trust-region training (APTS) for small
//! fully connected networks, with plain trust-region and first-order
//! baselines.

pub mod linalg;
pub mod lsr1;
pub mod model;
pub mod data;
pub mod trsubproblem;
pub mod trloop;
pub mod apts;
pub mod baselines;
pub mod training;
pub mod harness;

use thiserror::Error;

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Lsr1(#[from] lsr1::Lsr1Error),
    #[error(transparent)]
    Subproblem(#[from] trsubproblem::TrsError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
