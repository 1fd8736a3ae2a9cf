//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic bytes in field file (expected \"FGRD\")")]
    BadMagic,

    #[error("unsupported field file version {0}")]
    VersionMismatch(u32),

    #[error("truncated payload: expected {expected} values, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("covariance spectrum is not positive semidefinite beyond jitter tolerance (min eigenvalue {0})")]
    Spectrum(f64),

    #[error("linear solver did not converge within {iters} iterations (residual {residual})")]
    IterationLimit { iters: usize, residual: f64 },

    #[error("non-positive Darcy coefficient (min value {0})")]
    NonPositiveCoefficient(f64),

    #[error("Helmholtz wavenumber k={0} resonates with a discrete Laplacian eigenvalue")]
    Resonance(f64),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("sampling diverged at step {step} (sigma={sigma}): field max-abs {max_abs} exceeds 1e6")]
    Divergence { step: usize, sigma: f64, max_abs: f64 },

    #[error("non-finite loss at step {step} (sigma={sigma}, batch index {batch_index})")]
    NonFiniteLoss { step: usize, sigma: f64, batch_index: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// One-word machine-parseable category, used by the CLI exit path.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::BadMagic => "bad-magic",
            Error::VersionMismatch(_) => "version-mismatch",
            Error::Truncated { .. } => "truncated",
            Error::Spectrum(_) => "spectrum",
            Error::IterationLimit { .. } => "iteration-limit",
            Error::NonPositiveCoefficient(_) => "non-positive-coefficient",
            Error::Resonance(_) => "resonance",
            Error::Autodiff(_) => "autodiff",
            Error::Divergence { .. } => "divergence",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}
