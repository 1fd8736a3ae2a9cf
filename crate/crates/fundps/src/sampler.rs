//! Guided reverse-diffusion sampling: the Karras noise schedule, Heun
//! second-order deterministic steps, posterior guidance from sparse
//! observations and PDE residuals, and two-stage multi-resolution inference.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{NodeId, Shape, Tape, Tensor};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::field::{apply_mask, resample, Field, Grid2D, Mask, ObservationVector, ResampleMethod};
use crate::grf::GrfSampler;
use crate::pde::{PdeKind, PdeSpec};

pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Decreasing noise levels sigma_N ... sigma_1, with an appended 0.
#[derive(Debug, Clone)]
pub struct SigmaSchedule {
    pub sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 || *sigmas.last().unwrap() != 0.0 {
            return Err(Error::InvalidArgument("schedule must end with 0".into()));
        }
        if !sigmas.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("schedule must be strictly decreasing".into()));
        }
        Ok(SigmaSchedule { sigmas })
    }

    /// Number of sampler steps (transitions between consecutive levels).
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }
}

/// sigma_i = (sigma_max^(1/rho) + i/(N-1) (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho,
/// i = 0..N-1, then an appended 0.
pub fn karras_schedule(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaSchedule> {
    if n < 2 {
        return Err(Error::InvalidArgument("karras schedule needs N >= 2".into()));
    }
    if !(0.0 < sigma_min && sigma_min < sigma_max) || !(rho > 0.0) {
        return Err(Error::InvalidArgument("need 0 < sigma_min < sigma_max and rho > 0".into()));
    }
    let inv = 1.0 / rho;
    let (hi, lo) = (sigma_max.powf(inv), sigma_min.powf(inv));
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            (hi + t * (lo - hi)).powf(rho)
        })
        .collect();
    // make the endpoints exact against accumulated rounding
    sigmas[0] = sigma_max;
    sigmas[n - 1] = sigma_min;
    sigmas.push(0.0);
    SigmaSchedule::from_sigmas(sigmas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsLoss {
    /// Squared norm averaged over observed points.
    Mse,
    /// Un-squared norm (gradient normalized by the residual norm).
    L2,
}

impl std::str::FromStr for ObsLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(ObsLoss::Mse),
            "l2" => Ok(ObsLoss::L2),
            other => Err(Error::Config(format!("unknown observation loss {other}"))),
        }
    }
}

/// Per-channel affine transform from normalized to physical units
/// (physical = normalized * std + mean), applied before PDE residuals.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAffine {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct GuidanceTask {
    pub mask: Mask,
    pub observed: ObservationVector,
    pub obs_loss: ObsLoss,
    pub zeta_obs: f64,
    pub pde_spec: Option<PdeSpec>,
    pub huber_delta: f64,
    pub zeta_pde: f64,
    pub pde_active_below_sigma: f64,
    /// Channel de-normalization used inside PDE residuals, if the fields
    /// being sampled are z-normalized.
    pub denorm: Option<Vec<ChannelAffine>>,
}

impl GuidanceTask {
    pub fn new(mask: Mask, observed: ObservationVector) -> Result<Self> {
        if mask.true_count() != observed.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} observed points but {} values given",
                mask.true_count(),
                observed.len()
            )));
        }
        Ok(GuidanceTask {
            mask,
            observed,
            obs_loss: ObsLoss::Mse,
            zeta_obs: 0.0,
            pde_spec: None,
            huber_delta: 1.0,
            zeta_pde: 0.0,
            pde_active_below_sigma: 1.0,
            denorm: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.zeta_obs < 0.0 || self.zeta_pde < 0.0 {
            return Err(Error::InvalidArgument("guidance weights must be >= 0".into()));
        }
        if self.mask.true_count() != self.observed.len() {
            return Err(Error::ShapeMismatch("observed length must match mask".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::InvalidArgument("huber delta must be positive".into()));
        }
        Ok(())
    }
}

/// Guidance weights are dialed down at low noise: sigma * zeta below
/// sigma = 1, zeta otherwise.
pub fn effective_weight(zeta: f64, sigma: f64) -> f64 {
    if sigma < 1.0 {
        sigma * zeta
    } else {
        zeta
    }
}

/// Extracts channel `c` of a multi-channel grid node via a constant 1x1 mix.
fn extract_channel(tape: &mut Tape, x: NodeId, channels: usize, c: usize) -> Result<NodeId> {
    let mut w = vec![0.0; channels];
    w[c] = 1.0;
    let wid = tape.constant(Tensor::new(Shape::Vector(channels), w)?);
    tape.channel_mix(x, wid, 1)
}

/// Records the interior PDE residual of the joint (a, u) field on the tape.
fn trace_residual(
    tape: &mut Tape,
    x: NodeId,
    channels: usize,
    spec: &PdeSpec,
    denorm: &Option<Vec<ChannelAffine>>,
) -> Result<NodeId> {
    if channels < 2 {
        return Err(Error::ShapeMismatch("PDE residual needs (a, u) channels".into()));
    }
    let mut a = extract_channel(tape, x, channels, 0)?;
    let mut u = extract_channel(tape, x, channels, 1)?;
    if let Some(affines) = denorm {
        if affines.len() < 2 {
            return Err(Error::InvalidArgument("need a denormalization per channel".into()));
        }
        a = tape.scalar_mul(a, affines[0].std);
        a = tape.add_const(a, affines[0].mean);
        u = tape.scalar_mul(u, affines[1].std);
        u = tape.add_const(u, affines[1].mean);
    }
    let (ny, nx) = (spec.grid.ny, spec.grid.nx);
    let hx2 = ((nx - 1) as f64).powi(2);
    let hy2 = ((ny - 1) as f64).powi(2);
    let res = match spec.kind {
        PdeKind::Poisson | PdeKind::Helmholtz { .. } => {
            // five-point Laplacian via shifts, matching the solver stencil
            let e = tape.shift(u, 0, -1)?;
            let w = tape.shift(u, 0, 1)?;
            let n = tape.shift(u, -1, 0)?;
            let s = tape.shift(u, 1, 0)?;
            let um2 = tape.scalar_mul(u, -2.0);
            let sx = tape.add(e, w)?;
            let sx = tape.add(sx, um2)?;
            let sx = tape.scalar_mul(sx, hx2);
            let sy = tape.add(n, s)?;
            let sy = tape.add(sy, um2)?;
            let sy = tape.scalar_mul(sy, hy2);
            let mut lap = tape.add(sx, sy)?;
            if let PdeKind::Helmholtz { k } = spec.kind {
                let ku = tape.scalar_mul(u, k * k);
                lap = tape.add(lap, ku)?;
            }
            tape.sub(lap, a)?
        }
        PdeKind::Darcy => {
            // -div(a grad u) - 1 with harmonic-mean face coefficients
            let hm = |tape: &mut Tape, p: NodeId, q: NodeId| -> Result<NodeId> {
                let prod = tape.mul(p, q)?;
                let prod2 = tape.scalar_mul(prod, 2.0);
                let sum = tape.add(p, q)?;
                tape.div(prod2, sum)
            };
            let mut acc: Option<NodeId> = None;
            for (dy, dx, w) in [(0i64, -1i64, hx2), (0, 1, hx2), (-1, 0, hy2), (1, 0, hy2)] {
                let aq = tape.shift(a, dy, dx)?;
                let uq = tape.shift(u, dy, dx)?;
                let h = hm(tape, a, aq)?;
                let du = tape.sub(u, uq)?;
                let flux = tape.mul(h, du)?;
                let flux = tape.scalar_mul(flux, w);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, flux)?,
                    None => flux,
                });
            }
            tape.add_const(acc.unwrap(), -1.0)
        }
    };
    tape.zero_boundary(res)
}

/// gradient of zeta~_obs L_obs(u, M D(a, sigma)) + zeta~_pde Huber(residual(D(a, sigma)))
/// with respect to `a`, chained through the denoiser's vector-Jacobian
/// product.
pub fn guidance_gradient(
    denoiser: &dyn Denoiser,
    task: &GuidanceTask,
    a: &Field,
    sigma: f64,
) -> Result<Field> {
    task.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("guidance needs sigma > 0".into()));
    }
    let w_obs = effective_weight(task.zeta_obs, sigma);
    let pde_on = task.pde_spec.is_some()
        && sigma < task.pde_active_below_sigma
        && task.zeta_pde > 0.0;
    if w_obs == 0.0 && !pde_on {
        return Ok(Field::zeros(a.grid, a.channels));
    }
    let a0 = denoiser.denoise(a, sigma)?;

    // loss terms are differentiated with a0 as the leaf; the result is then
    // pulled back through one denoiser evaluation
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_field(&a0));
    let mut loss: Option<NodeId> = None;
    if w_obs > 0.0 && !task.observed.is_empty() {
        let gathered = tape.masked_gather(x, &task.mask)?;
        let obs = tape.constant(Tensor::new(Shape::Vector(task.observed.len()), task.observed.clone())?);
        let r = tape.sub(gathered, obs)?;
        let term = match task.obs_loss {
            ObsLoss::Mse => {
                let sq = tape.squared_l2(r);
                tape.scalar_mul(sq, w_obs / task.observed.len() as f64)
            }
            ObsLoss::L2 => {
                let norm = tape
                    .value(r)
                    .data
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                let sq = tape.squared_l2(r);
                // d/dx (|r|^2 / (2 |r|_frozen)) = M^T r / |r|
                tape.scalar_mul(sq, w_obs / (2.0 * norm.max(1e-300)))
            }
        };
        loss = Some(term);
    }
    if pde_on {
        let spec = task.pde_spec.as_ref().unwrap();
        let res = trace_residual(&mut tape, x, a.channels, spec, &task.denorm)?;
        let h = tape.huber_sum(res, task.huber_delta);
        let w_pde = effective_weight(task.zeta_pde, sigma);
        let term = tape.scalar_mul(h, w_pde);
        loss = Some(match loss {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    let loss = match loss {
        Some(l) => l,
        None => return Ok(Field::zeros(a.grid, a.channels)),
    };
    let cotangent = tape.grad(loss, &[x])?[0].to_field()?;
    denoiser.vjp(a, sigma, &cotangent)
}

fn check_finite(f: &Field, step: usize, sigma: f64) -> Result<()> {
    let m = f.max_abs();
    if !m.is_finite() || m > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, sigma, max_abs: m });
    }
    Ok(())
}

/// One full guided reverse-diffusion pass from a given initial field
/// (assumed to be at the schedule's first noise level).
pub fn fundps_sample_from(
    denoiser: &dyn Denoiser,
    task: &GuidanceTask,
    schedule: &SigmaSchedule,
    init: Field,
) -> Result<Field> {
    task.validate()?;
    let guided = task.zeta_obs > 0.0 || (task.zeta_pde > 0.0 && task.pde_spec.is_some());
    let mut a = init;
    for i in 0..schedule.steps() {
        let sigma = schedule.sigmas[i];
        let sigma_next = schedule.sigmas[i + 1];
        let d0 = denoiser.denoise(&a, sigma)?;
        let d = a.sub(&d0)?.scale(1.0 / sigma);
        let euler = a.add(&d.scale(sigma_next - sigma))?;
        if sigma_next > 0.0 {
            // Heun correction, then guidance at the corrector's input
            let d0b = denoiser.denoise(&euler, sigma_next)?;
            let db = euler.sub(&d0b)?.scale(1.0 / sigma_next);
            let heun = a.add(&d.add(&db)?.scale(0.5 * (sigma_next - sigma)))?;
            a = if guided {
                let g = guidance_gradient(denoiser, task, &euler, sigma_next)?;
                heun.sub(&g)?
            } else {
                heun
            };
        } else {
            a = if guided {
                // final Euler-only step: the last denoiser input was a_i
                let g = guidance_gradient(denoiser, task, &a, sigma)?;
                euler.sub(&g)?
            } else {
                euler
            };
        }
        check_finite(&a, i, sigma_next)?;
    }
    Ok(a)
}

/// Alg. flow: init a_N ~ N(0, sigma_max^2 C), then guided Heun steps down
/// the schedule. Deterministic given the seed.
pub fn fundps_sample(
    denoiser: &dyn Denoiser,
    task: &GuidanceTask,
    schedule: &SigmaSchedule,
    prior: &GrfSampler,
    seed: u64,
) -> Result<Field> {
    let init = prior.sample_channels(seed, schedule.sigmas[0], task.mask.channels);
    fundps_sample_from(denoiser, task, schedule, init)
}

/// Two-stage multi-resolution inference configuration.
#[derive(Debug, Clone)]
pub struct ReNoiseConfig {
    pub low_res: Grid2D,
    /// Fraction of the step budget spent at low resolution.
    pub t_up: f64,
    /// Restart noise level sigma(2)_max for the high-resolution tail.
    pub sigma_restart: f64,
    /// Noise level reached by the low-resolution stage.
    pub sigma_low_min: f64,
    pub upscale: ResampleMethod,
}

impl ReNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_up) {
            return Err(Error::Config("t_up must be in [0, 1]".into()));
        }
        if self.t_up > 0.0 && !(1.0..=10.0).contains(&self.sigma_restart) {
            return Err(Error::Config(format!(
                "restart noise level {} outside the allowed 1-10 range",
                self.sigma_restart
            )));
        }
        if !(self.sigma_low_min > 0.0) {
            return Err(Error::Config("stage-1 sigma_min must be positive".into()));
        }
        Ok(())
    }
}

/// Re-expresses a guidance task on a different grid by mapping each
/// observed point to its nearest node (first writer wins on collisions).
pub fn remap_task(task: &GuidanceTask, grid: Grid2D) -> Result<GuidanceTask> {
    let (sny, snx) = (task.mask.grid.ny, task.mask.grid.nx);
    let (tny, tnx) = (grid.ny, grid.nx);
    let channels = task.mask.channels;
    let mut indicator = vec![false; channels * tny * tnx];
    let mut values = vec![0.0; channels * tny * tnx];
    let src_indices = task.mask.observed_indices();
    for (k, &idx) in src_indices.iter().enumerate() {
        let c = idx / (sny * snx);
        let rem = idx % (sny * snx);
        let (i, j) = (rem / snx, rem % snx);
        let ti = (i * tny) / sny;
        let tj = (j * tnx) / snx;
        let t = (c * tny + ti) * tnx + tj;
        if !indicator[t] {
            indicator[t] = true;
            values[t] = task.observed[k];
        }
    }
    let mask = Mask::new(grid, channels, indicator)?;
    let observed: ObservationVector = mask
        .observed_indices()
        .iter()
        .map(|&t| values[t])
        .collect();
    let mut out = task.clone();
    if let Some(spec) = &task.pde_spec {
        out.pde_spec = Some(PdeSpec { kind: spec.kind, grid });
    }
    out.mask = mask;
    out.observed = observed;
    Ok(out)
}

/// ReNoise: a complete low-resolution sampling pass, upscaling, noise
/// re-injection at a modest level, and a high-resolution tail.
#[allow(clippy::too_many_arguments)]
pub fn renoise_sample(
    denoiser_low: &dyn Denoiser,
    denoiser_high: &dyn Denoiser,
    task: &GuidanceTask,
    cfg: &ReNoiseConfig,
    total_steps: usize,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
    prior_low: &GrfSampler,
    noise_high: &GrfSampler,
    seed: u64,
) -> Result<Field> {
    cfg.validate()?;
    let target = task.mask.grid;
    if cfg.t_up == 0.0 {
        let schedule = karras_schedule(total_steps, sigma_min, sigma_max, rho)?;
        // prior_low is ignored in the degenerate single-resolution case
        return fundps_sample(denoiser_high, task, &schedule, noise_high, seed);
    }
    let n1 = ((total_steps as f64) * cfg.t_up).round() as usize;
    let n2 = total_steps.saturating_sub(n1);
    if n1 < 2 || n2 < 2 {
        return Err(Error::Config("both ReNoise stages need at least 2 steps".into()));
    }
    let low_task = remap_task(task, cfg.low_res)?;
    let schedule1 = karras_schedule(n1, cfg.sigma_low_min, sigma_max, rho)?;
    let low = fundps_sample(denoiser_low, &low_task, &schedule1, prior_low, seed)?;
    let up = resample(&low, target, cfg.upscale);
    let fresh = noise_high.sample_channels(
        seed ^ 0x52454e4f49534531, // stage-2 stream
        cfg.sigma_restart,
        task.mask.channels,
    );
    let init = up.add(&fresh)?;
    let schedule2 = karras_schedule(n2, sigma_min, cfg.sigma_restart, rho)?;
    fundps_sample_from(denoiser_high, task, &schedule2, init)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Forward,
    Inverse,
    Recover,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(TaskKind::Forward),
            "inverse" => Ok(TaskKind::Inverse),
            "recover" => Ok(TaskKind::Recover),
            other => Err(Error::Config(format!("unknown task kind {other}"))),
        }
    }
}

/// Builds the observation mask and values for the task taxonomy over the
/// joint 2-channel (a, u) field: forward observes a fraction of channel 0,
/// inverse a fraction of channel 1, recover partial masks on both.
pub fn solve_task(kind: TaskKind, sample: &Field, obs_fraction: f64, seed: u64) -> Result<GuidanceTask> {
    if sample.channels != 2 {
        return Err(Error::ShapeMismatch("task taxonomy expects a 2-channel field".into()));
    }
    if !(0.0..=1.0).contains(&obs_fraction) {
        return Err(Error::InvalidArgument("obs_fraction must be in [0, 1]".into()));
    }
    let n = sample.grid.len();
    let count = ((n as f64) * obs_fraction).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut indicator = vec![false; 2 * n];
    let mut pick = |indicator: &mut Vec<bool>, channel: usize| {
        let mut placed = 0;
        while placed < count {
            let i = channel * n + rng.gen_range(0..n);
            if !indicator[i] {
                indicator[i] = true;
                placed += 1;
            }
        }
    };
    match kind {
        TaskKind::Forward => pick(&mut indicator, 0),
        TaskKind::Inverse => pick(&mut indicator, 1),
        TaskKind::Recover => {
            pick(&mut indicator, 0);
            pick(&mut indicator, 1);
        }
    }
    let mask = Mask::new(sample.grid, 2, indicator)?;
    let observed = apply_mask(sample, &mask)?;
    GuidanceTask::new(mask, observed)
}
