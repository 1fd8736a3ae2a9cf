//! Ground-truth data generation and PDE residual operators for Darcy,
//! Poisson and Helmholtz on the unit square with homogeneous Dirichlet
//! boundary conditions.
//!
//! All solvers use the node-centered convention: point (i, j) at
//! (j/(nx-1), i/(ny-1)), h = 1/(n-1) per axis, boundary nodes pinned to 0.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{self, Field, Grid2D};
use crate::grf::{build_sampler, CovarianceSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PdeKind {
    Darcy,
    Poisson,
    Helmholtz { k: f64 },
}

impl fmt::Display for PdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PdeKind::Darcy => write!(f, "darcy"),
            PdeKind::Poisson => write!(f, "poisson"),
            PdeKind::Helmholtz { k } => write!(f, "helmholtz k={k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeSpec {
    pub kind: PdeKind,
    pub grid: Grid2D,
}

/// Pointwise pushforward for Darcy coefficients: 12 for positive values,
/// 3 otherwise (zero included in the non-positive branch).
pub fn darcy_coeff_pushforward(g: &Field) -> Result<Field> {
    if g.channels != 1 {
        return Err(Error::ShapeMismatch("pushforward expects a single channel".into()));
    }
    Ok(g.map(|v| if v > 0.0 { 12.0 } else { 3.0 }))
}

/// Harmonic mean of two face-adjacent coefficients.
fn hmean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Applies the five-point Darcy operator u -> -div(a grad u) on interior
/// nodes of a square grid (boundary entries left at zero). Harmonic-mean
/// face coefficients.
pub fn darcy_apply(a: &Field, u: &[f64], out: &mut [f64]) {
    let (ny, nx) = (a.grid.ny, a.grid.nx);
    let hx = 1.0 / (nx - 1) as f64;
    let hy = 1.0 / (ny - 1) as f64;
    let av = a.channel(0);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 1..ny - 1 {
        for j in 1..nx - 1 {
            let p = i * nx + j;
            let ae = hmean(av[p], av[p + 1]);
            let aw = hmean(av[p], av[p - 1]);
            let an = hmean(av[p], av[p + nx]);
            let as_ = hmean(av[p], av[p - nx]);
            let ux = (ae * (u[p] - u[p + 1]) + aw * (u[p] - u[p - 1])) / (hx * hx);
            let uy = (an * (u[p] - u[p + nx]) + as_ * (u[p] - u[p - nx])) / (hy * hy);
            out[p] = ux + uy;
        }
    }
}

/// Solves -div(a grad u) = f with u = 0 on the boundary by preconditioned
/// conjugate gradients on the five-point system.
pub fn solve_darcy_forcing(a: &Field, f: &Field) -> Result<Field> {
    if a.channels != 1 {
        return Err(Error::ShapeMismatch("darcy coefficient must be single-channel".into()));
    }
    if a.grid != f.grid {
        return Err(Error::ShapeMismatch("coefficient and forcing grids differ".into()));
    }
    let min_a = a.values().iter().cloned().fold(f64::INFINITY, f64::min);
    if min_a <= 0.0 {
        return Err(Error::NonPositiveCoefficient(min_a));
    }
    let (ny, nx) = (a.grid.ny, a.grid.nx);
    let n = ny * nx;
    let interior = |p: usize| {
        let i = p / nx;
        let j = p % nx;
        i > 0 && i < ny - 1 && j > 0 && j < nx - 1
    };
    // rhs restricted to the interior
    let mut b = vec![0.0; n];
    for p in 0..n {
        if interior(p) {
            b[p] = f.values()[p];
        }
    }
    // Jacobi preconditioner: diagonal of the operator
    let hx2 = ((nx - 1) as f64).powi(2);
    let hy2 = ((ny - 1) as f64).powi(2);
    let av = a.channel(0);
    let mut diag = vec![1.0; n];
    for p in 0..n {
        if interior(p) {
            diag[p] = (hmean(av[p], av[p + 1]) + hmean(av[p], av[p - 1])) * hx2
                + (hmean(av[p], av[p + nx]) + hmean(av[p], av[p - nx])) * hy2;
        }
    }
    let mut u = vec![0.0; n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p_dir = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let bnorm = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut ap = vec![0.0; n];
    let max_iters = 20 * n;
    let mut converged = false;
    for _ in 0..max_iters {
        let rmax = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if rmax <= 1e-10 * bnorm.max(1.0) && rmax <= 1e-9 {
            converged = true;
            break;
        }
        darcy_apply(a, &p_dir, &mut ap);
        let pap: f64 = p_dir.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..n {
            if interior(i) {
                u[i] += alpha * p_dir[i];
                r[i] -= alpha * ap[i];
            }
        }
        for i in 0..n {
            z[i] = if interior(i) { r[i] / diag[i] } else { 0.0 };
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p_dir[i] = z[i] + beta * p_dir[i];
        }
    }
    if !converged {
        let rmax = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::IterationLimit {
            iters: max_iters,
            residual: rmax,
        });
    }
    Field::new(a.grid, 1, u)
}

/// Darcy flow with the paper's constant forcing f = 1.
pub fn solve_darcy(a: &Field) -> Result<Field> {
    solve_darcy_forcing(a, &Field::constant(a.grid, 1, 1.0))
}

/// Type-I discrete sine transform, X_p = sum_j x_j sin(pi p j / (m+1)).
fn dst1(x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let scale = std::f64::consts::PI / (m + 1) as f64;
    (1..=m)
        .map(|p| {
            x.iter()
                .enumerate()
                .map(|(idx, &v)| v * ((p * (idx + 1)) as f64 * scale).sin())
                .sum()
        })
        .collect()
}

fn dst2d(values: &[f64], m: usize) -> Vec<f64> {
    // rows then columns; DST-I is symmetric so the same kernel serves both
    let mut out = vec![0.0; m * m];
    let mut tmp = vec![0.0; m * m];
    for i in 0..m {
        let row = dst1(&values[i * m..(i + 1) * m]);
        tmp[i * m..(i + 1) * m].copy_from_slice(&row);
    }
    let mut col = vec![0.0; m];
    for j in 0..m {
        for i in 0..m {
            col[i] = tmp[i * m + j];
        }
        let t = dst1(&col);
        for i in 0..m {
            out[i * m + j] = t[i];
        }
    }
    out
}

/// Fast sine-transform diagonal solve of lap(u) + shift*u = a with u = 0 on
/// the boundary. `shift` is 0 for Poisson and k^2 for Helmholtz.
fn solve_sine(a: &Field, shift: f64) -> Result<Field> {
    if a.channels != 1 {
        return Err(Error::ShapeMismatch("source term must be single-channel".into()));
    }
    let (ny, nx) = (a.grid.ny, a.grid.nx);
    if ny != nx {
        return Err(Error::InvalidArgument(
            "sine-transform solver expects a square grid".into(),
        ));
    }
    let n = nx;
    let m = n - 2;
    let h = 1.0 / (n - 1) as f64;
    // gather interior source
    let mut src = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            src[i * m + j] = a.values()[(i + 1) * n + (j + 1)];
        }
    }
    let mut hat = dst2d(&src, m);
    // second-difference eigenvalues of the 1-D Dirichlet Laplacian
    let lam: Vec<f64> = (1..=m)
        .map(|p| (2.0 * (std::f64::consts::PI * p as f64 / (m + 1) as f64).cos() - 2.0) / (h * h))
        .collect();
    for i in 0..m {
        for j in 0..m {
            let denom = lam[i] + lam[j] + shift;
            if denom.abs() < 1e-12 {
                return Err(Error::Resonance(shift.max(0.0).sqrt()));
            }
            hat[i * m + j] /= denom;
        }
    }
    let mut inv = dst2d(&hat, m);
    let norm = (2.0 / (m + 1) as f64).powi(2);
    inv.iter_mut().for_each(|v| *v *= norm);
    let mut u = vec![0.0; n * n];
    for i in 0..m {
        for j in 0..m {
            u[(i + 1) * n + (j + 1)] = inv[i * m + j];
        }
    }
    Field::new(a.grid, 1, u)
}

/// lap(u) = a, u|boundary = 0.
pub fn solve_poisson(a: &Field) -> Result<Field> {
    solve_sine(a, 0.0)
}

/// lap(u) + k^2 u = a, u|boundary = 0.
pub fn solve_helmholtz(a: &Field, k: f64) -> Result<Field> {
    solve_sine(a, k * k)
}

/// Five-point Laplacian on interior nodes, zero on the boundary.
pub fn laplacian(u: &Field) -> Field {
    let (ny, nx) = (u.grid.ny, u.grid.nx);
    let hx2 = ((nx - 1) as f64).powi(2);
    let hy2 = ((ny - 1) as f64).powi(2);
    let uv = u.channel(0);
    let mut out = vec![0.0; ny * nx];
    for i in 1..ny - 1 {
        for j in 1..nx - 1 {
            let p = i * nx + j;
            out[p] = (uv[p + 1] - 2.0 * uv[p] + uv[p - 1]) * hx2
                + (uv[p + nx] - 2.0 * uv[p] + uv[p - nx]) * hy2;
        }
    }
    Field::new(u.grid, 1, out).unwrap()
}

/// Pointwise PDE residual on interior nodes, zero at the boundary.
/// Uses the same discretization as the corresponding solver.
pub fn residual(spec: &PdeSpec, a: &Field, u: &Field) -> Result<Field> {
    if a.grid != spec.grid || u.grid != spec.grid {
        return Err(Error::ShapeMismatch("residual: grids differ".into()));
    }
    let (ny, nx) = (spec.grid.ny, spec.grid.nx);
    match spec.kind {
        PdeKind::Poisson => {
            let lap = laplacian(u);
            interior_only(&lap.sub(a)?, ny, nx)
        }
        PdeKind::Helmholtz { k } => {
            let lap = laplacian(u);
            let r = lap.add(&u.scale(k * k))?.sub(a)?;
            interior_only(&r, ny, nx)
        }
        PdeKind::Darcy => {
            let mut op = vec![0.0; ny * nx];
            darcy_apply(a, u.channel(0), &mut op);
            let mut res = vec![0.0; ny * nx];
            for i in 1..ny - 1 {
                for j in 1..nx - 1 {
                    res[i * nx + j] = op[i * nx + j] - 1.0;
                }
            }
            Field::new(spec.grid, 1, res)
        }
    }
}

fn interior_only(f: &Field, ny: usize, nx: usize) -> Result<Field> {
    let mut vals = f.values().to_vec();
    for i in 0..ny {
        for j in 0..nx {
            if i == 0 || j == 0 || i == ny - 1 || j == nx - 1 {
                vals[i * nx + j] = 0.0;
            }
        }
    }
    Field::new(f.grid, 1, vals)
}

/// Interior max norm of a residual field.
pub fn residual_max(f: &Field) -> f64 {
    f.max_abs()
}

/// Deterministic per-sample seed derived from the master seed.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finalizer over master xor index
    let mut z = master ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-channel normalization statistics recorded in the dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub pde: String,
    pub grid: Grid2D,
    pub prior: String,
    pub n: usize,
    pub seed: u64,
    pub stats: Vec<ChannelStats>,
}

impl DatasetManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut s = String::new();
        s.push_str(&format!("pde {}\n", self.pde));
        s.push_str(&format!("nx {}\nny {}\n", self.grid.nx, self.grid.ny));
        s.push_str(&format!("prior {}\n", self.prior));
        s.push_str(&format!("n {}\nseed {}\n", self.n, self.seed));
        for (c, st) in self.stats.iter().enumerate() {
            s.push_str(&format!("mean{} {:.17e}\nstd{} {:.17e}\n", c, st.mean, c, st.std));
        }
        std::fs::write(dir.join("manifest"), s)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest"))?;
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("manifest missing key '{k}'")))
        };
        let nx: usize = get("nx")?.parse().map_err(|_| Error::Config("bad nx".into()))?;
        let ny: usize = get("ny")?.parse().map_err(|_| Error::Config("bad ny".into()))?;
        let n: usize = get("n")?.parse().map_err(|_| Error::Config("bad n".into()))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?;
        let mut stats = Vec::new();
        let mut c = 0;
        while let (Some(m), Some(s)) = (map.get(&format!("mean{c}")), map.get(&format!("std{c}"))) {
            stats.push(ChannelStats {
                mean: m.parse().map_err(|_| Error::Config("bad mean".into()))?,
                std: s.parse().map_err(|_| Error::Config("bad std".into()))?,
            });
            c += 1;
        }
        Ok(DatasetManifest {
            pde: get("pde")?,
            grid: Grid2D::new(nx, ny)?,
            prior: get("prior")?,
            n,
            seed,
            stats,
        })
    }

    pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
        dir.join(format!("sample_{index:06}.fgrd"))
    }

    /// z-normalizes a joint field with the manifest statistics.
    pub fn normalize(&self, f: &Field) -> Field {
        self.affine(f, |v, st| (v - st.mean) / st.std)
    }

    /// Inverts the normalization.
    pub fn denormalize(&self, f: &Field) -> Field {
        self.affine(f, |v, st| v * st.std + st.mean)
    }

    fn affine(&self, f: &Field, op: impl Fn(f64, &ChannelStats) -> f64) -> Field {
        let n = f.grid.len();
        let mut values = Vec::with_capacity(f.channels * n);
        for c in 0..f.channels {
            let st = &self.stats[c.min(self.stats.len() - 1)];
            values.extend(f.channel(c).iter().map(|&v| op(v, st)));
        }
        Field::new(f.grid, f.channels, values).unwrap()
    }
}

/// Generates `n` joint (a, u) samples as FGRD files plus a manifest.
/// Deterministic given the master seed.
pub fn gen_dataset(
    spec: &PdeSpec,
    prior: &CovarianceSpec,
    n: usize,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs n >= 1".into()));
    }
    std::fs::create_dir_all(dir)?;
    let sampler = build_sampler(prior, spec.grid)?;
    let mut sums = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    let per = spec.grid.len() as f64;
    for idx in 0..n {
        let g = sampler.sample(sample_seed(seed, idx), 1.0);
        let (a, u) = match spec.kind {
            PdeKind::Darcy => {
                let a = darcy_coeff_pushforward(&g)?;
                let u = solve_darcy(&a)?;
                (a, u)
            }
            PdeKind::Poisson => {
                let u = solve_poisson(&g)?;
                (g, u)
            }
            PdeKind::Helmholtz { k } => {
                let u = solve_helmholtz(&g, k)?;
                (g, u)
            }
        };
        for (c, ch) in [&a, &u].iter().enumerate() {
            for &v in ch.values() {
                sums[c] += v;
                sq[c] += v * v;
            }
        }
        let joint = Field::stack(&[&a, &u])?;
        field::write_field(&joint, DatasetManifest::sample_path(dir, idx))?;
    }
    let total = n as f64 * per;
    let stats: Vec<ChannelStats> = (0..2)
        .map(|c| {
            let mean = sums[c] / total;
            let var = (sq[c] / total - mean * mean).max(1e-30);
            ChannelStats { mean, std: var.sqrt() }
        })
        .collect();
    let manifest = DatasetManifest {
        pde: format!("{}", spec.kind),
        grid: spec.grid,
        prior: format!("{:?}", prior.kind),
        n,
        seed,
        stats,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Loads one dataset sample.
pub fn load_sample(dir: &Path, index: usize) -> Result<Field> {
    field::read_field(DatasetManifest::sample_path(dir, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid2D {
        Grid2D::new(n, n).unwrap()
    }

    #[test]
    fn pushforward_values() {
        let g = grid(4);
        let f = Field::new(g, 1, vec![0.5, -0.1, 0.0, 1.0, -2.0, 3.0, 0.0, -0.0, 2.0, 1.0, -1.0, 0.5, 0.1, -0.1, 0.2, -0.2]).unwrap();
        let out = darcy_coeff_pushforward(&f).unwrap();
        assert_eq!(out.values()[0], 12.0);
        assert_eq!(out.values()[1], 3.0);
        assert_eq!(out.values()[2], 3.0); // zero maps to the "otherwise" branch
        assert!(out.values().iter().all(|&v| v == 3.0 || v == 12.0));
    }

    #[test]
    fn darcy_unit_coefficient_center_value() {
        // a = 1 reduces to -lap(u) = 1; center value on the unit square is
        // the classical series constant ~0.07367.
        let g = grid(65);
        let a = Field::constant(g, 1, 1.0);
        let u = solve_darcy(&a).unwrap();
        let center = u.get(0, 32, 32);
        assert!((center - 0.07367).abs() < 5e-4, "center {center}");
    }

    #[test]
    fn darcy_scales_inversely_with_coefficient() {
        let g = grid(17);
        let a1 = Field::constant(g, 1, 1.0);
        let a2 = Field::constant(g, 1, 2.0);
        let u1 = solve_darcy(&a1).unwrap();
        let u2 = solve_darcy(&a2).unwrap();
        for (x, y) in u1.values().iter().zip(u2.values()) {
            assert_abs_diff_eq!(x / 2.0, *y, epsilon = 1e-9);
        }
    }

    #[test]
    fn darcy_rejects_non_positive_coefficient() {
        let g = grid(8);
        let a = Field::constant(g, 1, -1.0);
        assert!(matches!(solve_darcy(&a), Err(Error::NonPositiveCoefficient(_))));
    }

    #[test]
    fn poisson_eigenfunction() {
        let g = grid(33);
        let a = Field::from_fn_nodes(g, |x, y| -2.0 * PI * PI * (PI * x).sin() * (PI * y).sin());
        let u = solve_poisson(&a).unwrap();
        let truth = Field::from_fn_nodes(g, |x, y| (PI * x).sin() * (PI * y).sin());
        let err = u.sub(&truth).unwrap().max_abs();
        assert!(err < 1e-2, "err {err}"); // O(h^2)
        // zero source -> zero solution
        let z = solve_poisson(&Field::zeros(g, 1)).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn helmholtz_eigenfunction() {
        let g = grid(33);
        let a = Field::from_fn_nodes(g, |x, y| (1.0 - 2.0 * PI * PI) * (PI * x).sin() * (PI * y).sin());
        let u = solve_helmholtz(&a, 1.0).unwrap();
        let truth = Field::from_fn_nodes(g, |x, y| (PI * x).sin() * (PI * y).sin());
        assert!(u.sub(&truth).unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn solver_residual_consistency() {
        let g = grid(17);
        let spec = PdeSpec { kind: PdeKind::Poisson, grid: g };
        let a = Field::from_fn_nodes(g, |x, y| (3.0 * x).sin() + y * y);
        let u = solve_poisson(&a).unwrap();
        let r = residual(&spec, &a, &u).unwrap();
        assert!(residual_max(&r) < 1e-8, "poisson residual {}", residual_max(&r));

        let dspec = PdeSpec { kind: PdeKind::Darcy, grid: g };
        let ad = Field::constant(g, 1, 1.0);
        let ud = solve_darcy(&ad).unwrap();
        let rd = residual(&dspec, &ad, &ud).unwrap();
        assert!(residual_max(&rd) < 1e-6, "darcy residual {}", residual_max(&rd));
    }

    #[test]
    fn residual_of_zero_solution() {
        let g = grid(8);
        let spec = PdeSpec { kind: PdeKind::Poisson, grid: g };
        let a = Field::constant(g, 1, 1.0);
        let u = Field::zeros(g, 1);
        let r = residual(&spec, &a, &u).unwrap();
        for i in 1..7 {
            for j in 1..7 {
                assert_abs_diff_eq!(r.get(0, i, j), -1.0, epsilon = 1e-14);
            }
        }
        assert_eq!(r.get(0, 0, 3), 0.0);
    }

    #[test]
    fn sine_solvers_are_linear() {
        let g = grid(17);
        let a = Field::from_fn_nodes(g, |x, y| x * y);
        let b = Field::from_fn_nodes(g, |x, y| (x - y).cos());
        let lhs = solve_poisson(&a.scale(2.0).add(&b.scale(-1.5)).unwrap()).unwrap();
        let rhs = solve_poisson(&a)
            .unwrap()
            .scale(2.0)
            .add(&solve_poisson(&b).unwrap().scale(-1.5))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let spec = PdeSpec { kind: PdeKind::Darcy, grid: grid(16) };
        let prior = CovarianceSpec::matern_op(3.0, 2.0, 1.0);
        gen_dataset(&spec, &prior, 2, 7, dir1.path()).unwrap();
        gen_dataset(&spec, &prior, 2, 7, dir2.path()).unwrap();
        for i in 0..2 {
            let a = std::fs::read(DatasetManifest::sample_path(dir1.path(), i)).unwrap();
            let b = std::fs::read(DatasetManifest::sample_path(dir2.path(), i)).unwrap();
            assert_eq!(a, b);
            let f = load_sample(dir1.path(), i).unwrap();
            // darcy channel 0 takes only the pushforward values
            assert!(f.channel(0).iter().all(|&v| v == 3.0 || v == 12.0));
        }
        let m = DatasetManifest::read(dir1.path()).unwrap();
        assert_eq!(m.n, 2);
        assert_eq!(m.stats.len(), 2);
        let f = load_sample(dir1.path(), 0).unwrap();
        let norm = m.normalize(&f);
        let back = m.denormalize(&norm);
        assert!(back.sub(&f).unwrap().max_abs() < 1e-10);
    }
}
