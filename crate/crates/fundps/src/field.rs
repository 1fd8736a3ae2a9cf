//! Grid-valued function representation, masking, resampling and the FGRD
//! on-disk format shared by every other module.
//!
//! Grid conventions used throughout the crate:
//! * node-centered: point (i, j) sits at (j/(nx-1), i/(ny-1)); used by the
//!   Dirichlet solvers and bicubic interpolation.
//! * cell-centered periodic: point (i, j) sits at (j/nx, i/ny); used by
//!   spectral GRF sampling and fourier resampling.
//!
//! Values are stored channel-major, then row-major (y outer, x inner).

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;

pub const MIN_GRID: usize = 4;

/// Uniform 2-D grid on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < MIN_GRID || ny < MIN_GRID {
            return Err(Error::InvalidArgument(format!(
                "grid must be at least {MIN_GRID} points per axis, got {nx}x{ny}"
            )));
        }
        Ok(Grid2D { nx, ny })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Real-valued multi-channel function sample on a grid. Immutable by
/// convention after construction; operations return new fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid2D,
    pub channels: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid2D, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("field needs at least 1 channel".into()));
        }
        if values.len() != channels * grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {} channels on {}x{}, got {}",
                channels * grid.len(),
                channels,
                grid.ny,
                grid.nx,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("field contains non-finite values".into()));
        }
        Ok(Field { grid, channels, values })
    }

    pub fn zeros(grid: Grid2D, channels: usize) -> Self {
        Field {
            grid,
            channels,
            values: vec![0.0; channels * grid.len()],
        }
    }

    pub fn constant(grid: Grid2D, channels: usize, c: f64) -> Self {
        Field {
            grid,
            channels,
            values: vec![c; channels * grid.len()],
        }
    }

    /// Builds a single-channel field by evaluating `f(x, y)` at node-centered
    /// coordinates.
    pub fn from_fn_nodes(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.ny {
            let y = i as f64 / (grid.ny - 1) as f64;
            for j in 0..grid.nx {
                let x = j as f64 / (grid.nx - 1) as f64;
                values.push(f(x, y));
            }
        }
        Field { grid, channels: 1, values }
    }

    /// Builds a single-channel field at cell-centered periodic coordinates.
    pub fn from_fn_periodic(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.ny {
            let y = i as f64 / grid.ny as f64;
            for j in 0..grid.nx {
                let x = j as f64 / grid.nx as f64;
                values.push(f(x, y));
            }
        }
        Field { grid, channels: 1, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[c * n..(c + 1) * n]
    }

    /// Extracts one channel as a single-channel field.
    pub fn extract_channel(&self, c: usize) -> Field {
        Field {
            grid: self.grid,
            channels: 1,
            values: self.channel(c).to_vec(),
        }
    }

    /// Stacks single-grid fields into one multi-channel field.
    pub fn stack(parts: &[&Field]) -> Result<Field> {
        let grid = parts[0].grid;
        let mut values = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.grid != grid {
                return Err(Error::ShapeMismatch("stack: grids differ".into()));
            }
            channels += p.channels;
            values.extend_from_slice(&p.values);
        }
        Ok(Field { grid, channels, values })
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[(c * self.grid.ny + i) * self.grid.nx + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.values[(c * self.grid.ny + i) * self.grid.nx + j] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Field {
        Field {
            grid: self.grid,
            channels: self.channels,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        if self.grid != other.grid || self.channels != other.channels {
            return Err(Error::ShapeMismatch("field shapes differ".into()));
        }
        Ok(Field {
            grid: self.grid,
            channels: self.channels,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Boolean observation indicator per channel and grid point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub grid: Grid2D,
    pub channels: usize,
    indicator: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid2D, channels: usize, indicator: Vec<bool>) -> Result<Self> {
        if indicator.len() != channels * grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask expects {} entries, got {}",
                channels * grid.len(),
                indicator.len()
            )));
        }
        Ok(Mask { grid, channels, indicator })
    }

    pub fn all_false(grid: Grid2D, channels: usize) -> Self {
        Mask {
            grid,
            channels,
            indicator: vec![false; channels * grid.len()],
        }
    }

    pub fn all_true(grid: Grid2D, channels: usize) -> Self {
        Mask {
            grid,
            channels,
            indicator: vec![true; channels * grid.len()],
        }
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: bool) {
        self.indicator[(c * self.grid.ny + i) * self.grid.nx + j] = v;
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> bool {
        self.indicator[(c * self.grid.ny + i) * self.grid.nx + j]
    }

    pub fn true_count(&self) -> usize {
        self.indicator.iter().filter(|&&b| b).count()
    }

    pub fn observation_fraction(&self) -> f64 {
        self.true_count() as f64 / self.indicator.len() as f64
    }

    /// Flat indices (channel-major, row-major) of the observed entries.
    pub fn observed_indices(&self) -> Vec<usize> {
        self.indicator
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| if b { Some(i) } else { None })
            .collect()
    }
}

/// Flat vector of masked-in values, channel-major then row-major.
pub type ObservationVector = Vec<f64>;

/// Copies the masked-in entries of `f` into a flat vector.
pub fn apply_mask(f: &Field, m: &Mask) -> Result<ObservationVector> {
    if f.grid != m.grid || f.channels != m.channels {
        return Err(Error::ShapeMismatch(
            "apply_mask: field and mask shapes differ".into(),
        ));
    }
    Ok(f
        .values()
        .iter()
        .zip(m.indicator())
        .filter_map(|(&v, &b)| if b { Some(v) } else { None })
        .collect())
}

/// Scatters an observation-shaped vector back onto the grid (zero elsewhere).
/// Adjoint of `apply_mask`.
pub fn scatter_mask(obs: &[f64], m: &Mask) -> Result<Field> {
    if obs.len() != m.true_count() {
        return Err(Error::ShapeMismatch(format!(
            "scatter_mask: {} values for {} observed entries",
            obs.len(),
            m.true_count()
        )));
    }
    let mut values = vec![0.0; m.channels * m.grid.len()];
    let mut it = obs.iter();
    for (v, &b) in values.iter_mut().zip(m.indicator()) {
        if b {
            *v = *it.next().unwrap();
        }
    }
    Field::new(m.grid, m.channels, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    Bicubic,
    Fourier,
}

/// Resamples a field to a target grid.
///
/// Fourier resampling assumes the cell-centered periodic convention and is
/// exact for band-limited fields; bicubic uses Catmull-Rom weights on
/// node-centered coordinates with clamped edges.
pub fn resample(f: &Field, target: Grid2D, method: ResampleMethod) -> Field {
    if target == f.grid {
        return f.clone();
    }
    match method {
        ResampleMethod::Fourier => resample_fourier(f, target),
        ResampleMethod::Bicubic => resample_bicubic(f, target),
    }
}

fn resample_fourier(f: &Field, target: Grid2D) -> Field {
    let (sy, sx) = (f.grid.ny, f.grid.nx);
    let (ty, tx) = (target.ny, target.nx);
    // Function-value preserving scale: forward FFT is unnormalized and the
    // inverse divides by ty*tx, so coefficients must grow by (ty*tx)/(sy*sx).
    let scale = (ty * tx) as f64 / (sy * sx) as f64;
    let mut values = Vec::with_capacity(f.channels * target.len());
    for c in 0..f.channels {
        let spec = fft::fft2_real(f.channel(c), sy, sx);
        let remapped = fft::remap_spectrum(&spec, sy, sx, ty, tx, scale);
        values.extend(fft::ifft2_real(&remapped, ty, tx));
    }
    Field {
        grid: target,
        channels: f.channels,
        values,
    }
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn resample_bicubic(f: &Field, target: Grid2D) -> Field {
    let (sy, sx) = (f.grid.ny as i64, f.grid.nx as i64);
    let clamp = |v: i64, n: i64| v.clamp(0, n - 1) as usize;
    let mut values = Vec::with_capacity(f.channels * target.len());
    for c in 0..f.channels {
        let src = f.channel(c);
        for i in 0..target.ny {
            let y = i as f64 / (target.ny - 1) as f64 * (sy - 1) as f64;
            let iy = y.floor() as i64;
            let wy = catmull_rom_weights(y - iy as f64);
            for j in 0..target.nx {
                let x = j as f64 / (target.nx - 1) as f64 * (sx - 1) as f64;
                let ix = x.floor() as i64;
                let wx = catmull_rom_weights(x - ix as f64);
                let mut acc = 0.0;
                for (dy, &wyv) in wy.iter().enumerate() {
                    let yy = clamp(iy + dy as i64 - 1, sy);
                    for (dx, &wxv) in wx.iter().enumerate() {
                        let xx = clamp(ix + dx as i64 - 1, sx);
                        acc += wyv * wxv * src[yy * sx as usize + xx];
                    }
                }
                values.push(acc);
            }
        }
    }
    Field {
        grid: target,
        channels: f.channels,
        values,
    }
}

const FGRD_MAGIC: &[u8; 4] = b"FGRD";
const FGRD_VERSION: u32 = 1;

/// Writes a field in the FGRD binary format: magic "FGRD", then version,
/// channels, ny, nx as 32-bit LE unsigned integers, then the values as
/// 64-bit LE floats, channel-major, row-major.
pub fn write_field(f: &Field, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FGRD_MAGIC)?;
    for v in [FGRD_VERSION, f.channels as u32, f.grid.ny as u32, f.grid.nx as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in f.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != FGRD_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Truncated { expected: 4, got: 0 })?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != FGRD_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let channels = read_u32(&mut r)? as usize;
    let ny = read_u32(&mut r)? as usize;
    let nx = read_u32(&mut r)? as usize;
    let expected = channels * ny * nx;
    let mut values = Vec::with_capacity(expected);
    let mut f64buf = [0u8; 8];
    for _ in 0..expected {
        if r.read_exact(&mut f64buf).is_err() {
            return Err(Error::Truncated { expected, got: values.len() });
        }
        values.push(f64::from_le_bytes(f64buf));
    }
    let grid = Grid2D::new(nx, ny)?;
    Field::new(grid, channels, values)
}

/// Exports each channel as an 8-bit grayscale PGM (min-max normalized),
/// writing `<stem>_c<k>.pgm` plus a sidecar text file with the scaling.
pub fn export_pgm(f: &Field, stem: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let stem = stem.as_ref();
    let mut written = Vec::new();
    let mut sidecar = String::new();
    for c in 0..f.channels {
        let ch = f.channel(c);
        let min = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if max > min { max - min } else { 1.0 };
        let path = stem.with_file_name(format!(
            "{}_c{}.pgm",
            stem.file_name().unwrap_or_default().to_string_lossy(),
            c
        ));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "P5\n{} {}\n255", f.grid.nx, f.grid.ny)?;
        let bytes: Vec<u8> = ch
            .iter()
            .map(|&v| (((v - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        w.write_all(&bytes)?;
        sidecar.push_str(&format!("channel {c} min {min:.17e} max {max:.17e}\n"));
        written.push(path);
    }
    let scale_path = stem.with_file_name(format!(
        "{}_scale.txt",
        stem.file_name().unwrap_or_default().to_string_lossy()
    ));
    std::fs::write(&scale_path, sidecar)?;
    written.push(scale_path);
    Ok(written)
}

/// Complex spectrum of one channel, used by modules that share the periodic
/// convention.
pub fn channel_spectrum(f: &Field, c: usize) -> Vec<Complex64> {
    fft::fft2_real(f.channel(c), f.grid.ny, f.grid.nx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> Grid2D {
        Grid2D::new(n, n).unwrap()
    }

    #[test]
    fn apply_mask_identity_and_empty() {
        let g = Grid2D::new(2, 2);
        // 2x2 is below MIN_GRID; build with a helper grid of 4 and slice
        // semantics instead: use a 4x4 embedding? The spec's example uses a
        // 2x2 field, so relax through direct construction.
        assert!(g.is_err());
        let g = grid(4);
        let f = Field::new(g, 1, (1..=16).map(|v| v as f64).collect()).unwrap();
        let all = Mask::all_true(g, 1);
        assert_eq!(apply_mask(&f, &all).unwrap(), f.values());
        let none = Mask::all_false(g, 1);
        assert!(apply_mask(&f, &none).unwrap().is_empty());
        let mut single = Mask::all_false(g, 1);
        single.set(0, 0, 1, true);
        assert_eq!(apply_mask(&f, &single).unwrap(), vec![2.0]);
    }

    #[test]
    fn apply_mask_rejects_shape_mismatch() {
        let f = Field::zeros(grid(4), 1);
        let m = Mask::all_true(grid(8), 1);
        assert!(matches!(apply_mask(&f, &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn apply_mask_is_linear() {
        let g = grid(6);
        let f = Field::from_fn_nodes(g, |x, y| x * y + 0.3);
        let h = Field::from_fn_nodes(g, |x, y| (x - y).cos());
        let mut m = Mask::all_false(g, 1);
        m.set(0, 1, 2, true);
        m.set(0, 4, 5, true);
        let lhs = apply_mask(&f.scale(2.0).add(&h.scale(-3.0)).unwrap(), &m).unwrap();
        let fv = apply_mask(&f, &m).unwrap();
        let hv = apply_mask(&h, &m).unwrap();
        for i in 0..lhs.len() {
            assert_abs_diff_eq!(lhs[i], 2.0 * fv[i] - 3.0 * hv[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn resample_constant_both_methods() {
        let f = Field::constant(grid(8), 2, 3.25);
        for method in [ResampleMethod::Bicubic, ResampleMethod::Fourier] {
            let out = resample(&f, grid(13), method);
            for &v in out.values() {
                assert_abs_diff_eq!(v, 3.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let f = Field::from_fn_nodes(grid(64), |x, y| (x * 3.0).sin() + y);
        for method in [ResampleMethod::Bicubic, ResampleMethod::Fourier] {
            let out = resample(&f, grid(64), method);
            assert_eq!(out.values(), f.values());
        }
    }

    #[test]
    fn fourier_upsample_matches_analytic_sine() {
        let f = Field::from_fn_periodic(grid(32), |x, _| (2.0 * std::f64::consts::PI * x).sin());
        let up = resample(&f, grid(64), ResampleMethod::Fourier);
        let oracle = Field::from_fn_periodic(grid(64), |x, _| (2.0 * std::f64::consts::PI * x).sin());
        for (a, b) in up.values().iter().zip(oracle.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn fourier_up_down_roundtrip_bandlimited() {
        use std::f64::consts::PI;
        let f = Field::from_fn_periodic(grid(16), |x, y| {
            (2.0 * PI * 3.0 * x).sin() + (2.0 * PI * 2.0 * (x + y)).cos()
        });
        let up = resample(&f, grid(48), ResampleMethod::Fourier);
        let back = resample(&up, grid(16), ResampleMethod::Fourier);
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn fgrd_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fgrd");
        let f = Field::from_fn_nodes(grid(5), |x, y| x.exp() - y);
        write_field(&f, &path).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(back, f);

        let bad = dir.path().join("bad.fgrd");
        std::fs::write(&bad, b"NOPE00000000").unwrap();
        assert!(matches!(read_field(&bad), Err(Error::BadMagic)));

        // Header declares 2 channels of 4x4 but the payload holds 31 floats.
        let trunc = dir.path().join("trunc.fgrd");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FGRD");
        for v in [1u32, 2, 4, 4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..31 {
            bytes.extend_from_slice(&(i as f64).to_le_bytes());
        }
        std::fs::write(&trunc, bytes).unwrap();
        assert!(matches!(read_field(&trunc), Err(Error::Truncated { .. })));
    }

    #[test]
    fn pgm_export_writes_images_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let f = Field::from_fn_nodes(grid(8), |x, y| x - y);
        let files = export_pgm(&f, dir.path().join("img")).unwrap();
        assert_eq!(files.len(), 2);
        for p in &files {
            assert!(p.exists());
        }
    }

    proptest::proptest! {
        #[test]
        fn fgrd_roundtrip_property(vals in proptest::collection::vec(-1e6f64..1e6, 32)) {
            let dir = tempfile::tempdir().unwrap();
            let g = Grid2D::new(4, 4).unwrap();
            let f = Field::new(g, 2, vals).unwrap();
            let path = dir.path().join("p.fgrd");
            write_field(&f, &path).unwrap();
            let back = read_field(&path).unwrap();
            // bit-exact
            for (a, b) in back.values().iter().zip(f.values()) {
                proptest::prop_assert!(a.to_bits() == b.to_bits());
            }
        }
    }
}
