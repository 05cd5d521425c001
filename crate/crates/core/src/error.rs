// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("site {site} out of range for {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },
    #[error("invalid spin system: {0}")]
    InvalidSystem(String),
    #[error("degenerate quantization frame for nucleus {0}")]
    DegenerateFrame(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("infeasible frequency pair ({omega_up}, {omega_down}) for Larmor {larmor}")]
    InfeasibleFrequencies {
        omega_up: f64,
        omega_down: f64,
        larmor: f64,
    },
    #[error("underdetermined measurement set: {0}")]
    Underdetermined(String),
    #[error("pre-distortion diverged after {0} iterations")]
    Diverged(usize),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
