//! Gaussian random field sampling on the periodic unit torus.
//!
//! The diffusion noise measure and the data-generating priors are all
//! stationary GRFs, sampled spectrally: color white noise by the square
//! root of the covariance spectrum in the Fourier basis (circulant
//! embedding on the torus). The coloring map is real, symmetric and
//! positive semidefinite, so it equals C^{1/2} for the induced covariance.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::field::{Field, Grid2D};

pub const DEFAULT_JITTER: f64 = 1e-12;
/// Relative tolerance on negative periodized-kernel eigenvalues before the
/// spectrum is declared invalid rather than clamped.
const SPECTRUM_NEG_TOL: f64 = 1e-6;

/// Spectral description of a stationary covariance operator.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceKind {
    /// Periodized squared-exponential kernel exp(-r^2 / (2 l^2)).
    Rbf { length_scale: f64 },
    /// Inverse elliptic operator: C = scale^2 (-Delta + tau^2 I)^(-alpha),
    /// i.e. mode (k1,k2) amplitude scale*(4 pi^2 |k|^2 + tau^2)^(-alpha/2).
    MaternOp { tau: f64, alpha: f64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub kind: CovarianceKind,
    pub jitter: f64,
}

impl CovarianceSpec {
    pub fn rbf(length_scale: f64) -> Self {
        CovarianceSpec {
            kind: CovarianceKind::Rbf { length_scale },
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn matern_op(tau: f64, alpha: f64, scale: f64) -> Self {
        CovarianceSpec {
            kind: CovarianceKind::MaternOp { tau, alpha, scale },
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jitter < 0.0 {
            return Err(Error::InvalidArgument("jitter must be >= 0".into()));
        }
        match self.kind {
            CovarianceKind::Rbf { length_scale } => {
                if !(length_scale > 0.0 && length_scale < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "rbf length_scale must lie in (0,1), got {length_scale}"
                    )));
                }
            }
            CovarianceKind::MaternOp { tau, alpha, scale } => {
                if tau <= 0.0 || scale <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "matern_op tau and scale must be positive".into(),
                    ));
                }
                if alpha <= 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "matern_op alpha must exceed 1 for a trace-class operator, got {alpha}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Precomputed spectral factor of a covariance on a fixed grid.
///
/// `sqrt_spectrum[k]` is the raw per-mode amplitude (eigenvalue of C^{1/2}
/// in the Fourier basis); `norm` rescales samples so the pointwise variance
/// at sigma = 1 equals 1.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    pub spec: CovarianceSpec,
    pub grid: Grid2D,
    sqrt_spectrum: Vec<f64>,
    norm: f64,
}

pub fn build_sampler(spec: &CovarianceSpec, grid: Grid2D) -> Result<GrfSampler> {
    spec.validate()?;
    let (ny, nx) = (grid.ny, grid.nx);
    let amp = match spec.kind {
        CovarianceKind::MaternOp { tau, alpha, scale } => {
            let mut amp = Vec::with_capacity(ny * nx);
            for iy in 0..ny {
                let ky = fft::freq(iy, ny) as f64;
                for ix in 0..nx {
                    let kx = fft::freq(ix, nx) as f64;
                    let lam = 4.0 * std::f64::consts::PI.powi(2) * (ky * ky + kx * kx) + tau * tau;
                    amp.push(scale * lam.powf(-alpha / 2.0));
                }
            }
            amp
        }
        CovarianceKind::Rbf { length_scale } => {
            // Eigenvalues of the circulant periodized kernel matrix.
            let mut row = Vec::with_capacity(ny * nx);
            for iy in 0..ny {
                let dy = (iy.min(ny - iy)) as f64 / ny as f64;
                for ix in 0..nx {
                    let dx = (ix.min(nx - ix)) as f64 / nx as f64;
                    row.push((-(dx * dx + dy * dy) / (2.0 * length_scale * length_scale)).exp());
                }
            }
            let spec_c = fft::fft2_real(&row, ny, nx);
            let max_lam = spec_c.iter().map(|c| c.re).fold(0.0f64, f64::max);
            let mut amp = Vec::with_capacity(ny * nx);
            for c in spec_c {
                let lam = c.re + spec.jitter;
                if lam < -SPECTRUM_NEG_TOL * max_lam {
                    return Err(Error::Spectrum(lam));
                }
                amp.push(lam.max(0.0).sqrt());
            }
            amp
        }
    };
    if !amp.iter().all(|a| a.is_finite() && *a >= 0.0) {
        return Err(Error::Spectrum(f64::NAN));
    }
    let n = (ny * nx) as f64;
    let var = amp.iter().map(|a| a * a).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::Spectrum(0.0));
    }
    let norm = 1.0 / var.sqrt();
    Ok(GrfSampler {
        spec: spec.clone(),
        grid,
        sqrt_spectrum: amp,
        norm,
    })
}

impl GrfSampler {
    /// Raw per-mode amplitudes, indexed [ny, nx] in DFT order.
    pub fn sqrt_spectrum(&self) -> &[f64] {
        &self.sqrt_spectrum
    }

    /// Normalization constant applied to samples (unit pointwise variance).
    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Per-mode amplitude of the normalized coloring map C^{1/2}.
    pub fn mode_amp(&self, iy: usize, ix: usize) -> f64 {
        self.norm * self.sqrt_spectrum[iy * self.grid.nx + ix]
    }

    /// Draws a mean-zero field with covariance sigma^2 C, one channel.
    pub fn sample(&self, seed: u64, sigma: f64) -> Field {
        self.sample_channels(seed, sigma, 1)
    }

    /// Independent GRF channels from one seeded stream.
    pub fn sample_channels(&self, seed: u64, sigma: f64, channels: usize) -> Field {
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        if sigma == 0.0 {
            return Field::zeros(self.grid, channels);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(channels * ny * nx);
        for _ in 0..channels {
            let white: Vec<f64> = (0..ny * nx)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            values.extend(self.colorize_values(&white, sigma));
        }
        Field::new(self.grid, channels, values).expect("GRF sample is finite by construction")
    }

    fn colorize_values(&self, white: &[f64], sigma: f64) -> Vec<f64> {
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        let mut spec = fft::fft2_real(white, ny, nx);
        for (s, &a) in spec.iter_mut().zip(&self.sqrt_spectrum) {
            *s *= sigma * self.norm * a;
        }
        fft::ifft2_real(&spec, ny, nx)
    }

    /// Applies the coloring map C^{1/2} to a field (all channels).
    pub fn colorize(&self, f: &Field) -> Result<Field> {
        self.check_grid(f)?;
        let mut values = Vec::with_capacity(f.channels * self.grid.len());
        for c in 0..f.channels {
            values.extend(self.colorize_values(f.channel(c), 1.0));
        }
        Field::new(f.grid, f.channels, values)
    }

    /// Applies C^(-1/2) spectrally, zeroing modes with zero amplitude.
    pub fn whiten(&self, f: &Field) -> Result<Field> {
        self.check_grid(f)?;
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        let mut values = Vec::with_capacity(f.channels * self.grid.len());
        for c in 0..f.channels {
            let mut spec = fft::fft2_real(f.channel(c), ny, nx);
            for (s, &a) in spec.iter_mut().zip(&self.sqrt_spectrum) {
                let amp = self.norm * a;
                *s = if amp > 0.0 {
                    *s / amp
                } else {
                    Complex64::default()
                };
            }
            values.extend(fft::ifft2_real(&spec, ny, nx));
        }
        Field::new(f.grid, f.channels, values)
    }

    /// Cameron-Martin squared norm |f|^2_H = |C^(-1/2) f|^2_(l2).
    pub fn cameron_martin_norm_sq(&self, f: &Field) -> Result<f64> {
        let w = self.whiten(f)?;
        Ok(w.values().iter().map(|v| v * v).sum())
    }

    /// Dense covariance matrix of a single-channel sample at sigma = 1
    /// (row-major point ordering). Intended for small oracle grids only.
    pub fn dense_covariance(&self) -> Vec<f64> {
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        let n = ny * nx;
        // C is circulant: its first row is the inverse FFT of the full
        // spectrum norm^2 * amp^2.
        let spec: Vec<Complex64> = self
            .sqrt_spectrum
            .iter()
            .map(|&a| Complex64::new((self.norm * a).powi(2), 0.0))
            .collect();
        let row0 = fft::ifft2_real(&spec, ny, nx);
        let mut cov = vec![0.0; n * n];
        for py in 0..ny {
            for px in 0..nx {
                let p = py * nx + px;
                for qy in 0..ny {
                    for qx in 0..nx {
                        let q = qy * nx + qx;
                        let dy = (py + ny - qy) % ny;
                        let dx = (px + nx - qx) % nx;
                        // C = F^-1 diag(amp_n^2) F, so the entry is the
                        // inverse FFT of the squared normalized spectrum at
                        // lag p - q; ifft2_real already carries the 1/N.
                        cov[p * n + q] = row0[dy * nx + dx];
                    }
                }
            }
        }
        cov
    }

    fn check_grid(&self, f: &Field) -> Result<()> {
        if f.grid != self.grid {
            return Err(Error::ShapeMismatch("field is not on the sampler's grid".into()));
        }
        Ok(())
    }
}
