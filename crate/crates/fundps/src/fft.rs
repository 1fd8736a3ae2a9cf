//! Thin 2-D FFT helpers over row-major `[ny, nx]` buffers.
//!
//! All transforms here use the unnormalized forward / (1/N)-normalized
//! inverse convention of rustfft; callers apply their own scaling.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place 2-D forward FFT of a row-major [ny, nx] complex buffer.
pub fn fft2(data: &mut [Complex64], ny: usize, nx: usize) {
    fft2_dir(data, ny, nx, false);
}

/// In-place 2-D inverse FFT (includes the 1/(ny*nx) factor).
pub fn ifft2(data: &mut [Complex64], ny: usize, nx: usize) {
    fft2_dir(data, ny, nx, true);
    let scale = 1.0 / (ny as f64 * nx as f64);
    for v in data.iter_mut() {
        *v *= scale;
    }
}

fn fft2_dir(data: &mut [Complex64], ny: usize, nx: usize, inverse: bool) {
    assert_eq!(data.len(), ny * nx);
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(nx)
    } else {
        planner.plan_fft_forward(nx)
    };
    for row in data.chunks_exact_mut(nx) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(ny)
    } else {
        planner.plan_fft_forward(ny)
    };
    let mut col = vec![Complex64::default(); ny];
    for x in 0..nx {
        for y in 0..ny {
            col[y] = data[y * nx + x];
        }
        col_fft.process(&mut col);
        for y in 0..ny {
            data[y * nx + x] = col[y];
        }
    }
}

/// Forward 2-D FFT of a real buffer.
pub fn fft2_real(values: &[f64], ny: usize, nx: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, ny, nx);
    buf
}

/// Inverse 2-D FFT, returning the real part.
pub fn ifft2_real(spectrum: &[Complex64], ny: usize, nx: usize) -> Vec<f64> {
    let mut buf = spectrum.to_vec();
    ifft2(&mut buf, ny, nx);
    buf.into_iter().map(|c| c.re).collect()
}

/// Signed integer frequency of DFT index `i` on a grid of size `n`.
pub fn freq(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if i <= n / 2 {
        i
    } else {
        i - n
    }
}

/// Per-axis spectral index mapping: where source index `i` (size `s`) lands
/// on a grid of size `t`, with the weight factor that keeps real signals
/// real across Nyquist splits. At most two targets per source index.
fn axis_targets(i: usize, s: usize, t: usize) -> Vec<(usize, f64)> {
    let k = freq(i, s);
    if t >= s {
        // Upsampling: a source Nyquist mode carries both signed frequencies
        // and must be split in half between them on the larger grid.
        if t > s && s % 2 == 0 && i == s / 2 {
            return vec![(s / 2, 0.5), (t - s / 2, 0.5)];
        }
        vec![((k.rem_euclid(t as i64)) as usize, 1.0)]
    } else {
        // Downsampling: truncate to the target band; the two signed source
        // modes at the target Nyquist frequency both land on the same index.
        let half = (t / 2) as i64;
        if k.abs() < half || (t % 2 == 1 && k.abs() == half) {
            vec![((k.rem_euclid(t as i64)) as usize, 1.0)]
        } else if t % 2 == 0 && k.abs() == half {
            vec![(t / 2, 1.0)]
        } else {
            vec![]
        }
    }
}

/// Moves spectral modes between grids of different sizes, splitting or
/// merging Nyquist rows/columns so that band-limited real signals
/// round-trip exactly. `scale` multiplies every copied coefficient.
pub fn remap_spectrum(
    src: &[Complex64],
    sy: usize,
    sx: usize,
    ty: usize,
    tx: usize,
    scale: f64,
) -> Vec<Complex64> {
    let mut dst = vec![Complex64::default(); ty * tx];
    for iy in 0..sy {
        let ys = axis_targets(iy, sy, ty);
        if ys.is_empty() {
            continue;
        }
        for ix in 0..sx {
            let v = src[iy * sx + ix] * scale;
            if v.norm_sqr() == 0.0 {
                continue;
            }
            for &(tyi, fy) in &ys {
                for (txi, fx) in axis_targets(ix, sx, tx) {
                    dst[tyi * tx + txi] += v * (fy * fx);
                }
            }
        }
    }
    dst
}

/// Transpose of `remap_spectrum` going from `(ty, tx)` to `(sy, sx)`:
/// gathers from `src` (size `sy * sx`) using the index map of the forward
/// remap whose source had size `(ty, tx)`.
pub fn remap_spectrum_adjoint(
    src: &[Complex64],
    sy: usize,
    sx: usize,
    ty: usize,
    tx: usize,
    scale: f64,
) -> Vec<Complex64> {
    let mut dst = vec![Complex64::default(); ty * tx];
    for iy in 0..ty {
        let ys = axis_targets(iy, ty, sy);
        if ys.is_empty() {
            continue;
        }
        for ix in 0..tx {
            let mut acc = Complex64::default();
            for &(syi, fy) in &ys {
                for (sxi, fx) in axis_targets(ix, tx, sx) {
                    acc += src[syi * sx + sxi] * (fy * fx);
                }
            }
            dst[iy * tx + ix] = acc * scale;
        }
    }
    dst
}
