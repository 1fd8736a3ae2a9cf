//! Function-space diffusion posterior sampling for PDE forward and inverse
//! problems: Gaussian-random-field noise diffusion priors, a spectral
//! U-shaped neural-operator denoiser, guided reverse-diffusion sampling from
//! sparse observations, and closed-form oracles that verify the machinery.

pub mod autodiff;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod fft;
pub mod field;
pub mod grf;
pub mod metrics;
pub mod oracle;
pub mod pde;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
pub use field::{Field, Grid2D, Mask};
