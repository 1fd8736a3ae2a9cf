//! Denoising score-matching training loop: log-uniform noise levels,
//! EDM-weighted loss, Adam with linear warmup, EMA weights, and a
//! coarse-to-fine curriculum over dataset resolutions.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::denoiser::{edm_weight, DenoiserModel, Dropout};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grf::{build_sampler, CovarianceSpec, GrfSampler};
use crate::pde::{load_sample, DatasetManifest};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// EMA half life measured in training samples seen. `f64::INFINITY`
    /// freezes the EMA at its initial value.
    pub ema_half_life_samples: f64,
    /// Fraction of the total samples seen over which the learning rate
    /// ramps linearly from 0 to `lr`.
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 1,
            dropout: 0.13,
            sigma_min: 0.002,
            sigma_max: 80.0,
            ema_half_life_samples: 500.0,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size and epochs must be positive".into()));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(Error::Config("need 0 < sigma_min < sigma_max".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1]".into()));
        }
        if !(self.ema_half_life_samples > 0.0) {
            return Err(Error::Config("ema_half_life_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Log-uniform noise level in [sigma_min, sigma_max].
pub fn sample_sigma(rng: &mut ChaCha20Rng, sigma_min: f64, sigma_max: f64) -> f64 {
    let t: f64 = rng.gen_range(0.0..1.0);
    (sigma_min.ln() + t * (sigma_max.ln() - sigma_min.ln())).exp()
}

/// Adam optimizer state over the model's flat parameter list.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(model: &DenoiserModel) -> Self {
        let shapes: Vec<usize> = model.params.tensors.iter().map(|t| t.data.len()).collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut DenoiserModel, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, (g, (m, v))) in model
            .params
            .tensors
            .iter_mut()
            .zip(grads.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())))
        {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// ema <- decay * ema + (1 - decay) * params, decay = 0.5^(batch/half_life).
pub fn ema_update(model: &mut DenoiserModel, batch: usize, half_life_samples: f64) {
    let decay = 0.5f64.powf(batch as f64 / half_life_samples);
    if decay >= 1.0 {
        return;
    }
    for (e, p) in model.ema.tensors.iter_mut().zip(&model.params.tensors) {
        for (ev, pv) in e.data.iter_mut().zip(&p.data) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
}

/// One optimizer step on a batch of clean (normalized) fields. Returns the
/// batch loss. Per-sample noise levels are log-uniform; the noise itself is
/// a GRF draw scaled by sigma, matching the forward process the sampler
/// inverts.
pub fn train_step(
    model: &mut DenoiserModel,
    adam: &mut Adam,
    batch: &[Field],
    noising: &GrfSampler,
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
    lr: f64,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let nspecs = model.params.tensors.len();
    let mut grads: Vec<Vec<f64>> = model
        .params
        .tensors
        .iter()
        .map(|t| vec![0.0; t.data.len()])
        .collect();
    let mut total_loss = 0.0;
    let bsz = batch.len() as f64;
    for (bi, clean) in batch.iter().enumerate() {
        let sigma = sample_sigma(rng, cfg.sigma_min, cfg.sigma_max);
        let noise = noising.sample_channels(rng.gen::<u64>(), sigma, clean.channels);
        let noisy = clean.add(&noise)?;
        let lambda = edm_weight(sigma, model.config.sigma_data);
        let n_entries = (clean.channels * clean.grid.len()) as f64;

        let mut tape = crate::autodiff::Tape::new();
        let pnodes = model.register_params(&mut tape, false, true);
        let y = tape.constant(crate::autodiff::Tensor::from_field(&noisy));
        let dropout = if cfg.dropout > 0.0 {
            Some(Dropout { rate: cfg.dropout, rng })
        } else {
            None
        };
        let out = model.trace(&mut tape, y, sigma, &pnodes, dropout)?;
        let target = tape.constant(crate::autodiff::Tensor::from_field(clean));
        let diff = tape.sub(out, target)?;
        let sq = tape.squared_l2(diff);
        let loss = tape.scalar_mul(sq, lambda / (n_entries * bsz));
        let lv = tape.value(loss).data[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step, sigma, batch_index: bi });
        }
        total_loss += lv;
        let g = tape.grad(loss, &pnodes)?;
        for (acc, t) in grads.iter_mut().take(nspecs).zip(&g) {
            for (a, b) in acc.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
    }
    adam.step(model, &grads, lr);
    ema_update(model, batch.len(), cfg.ema_half_life_samples);
    Ok(total_loss)
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub sigma_bucket: f64,
    pub loss: f64,
    pub ema_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,sigma_bucket,loss,ema_loss,seconds\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6e},{:.6e},{:.6e},{:.3}\n",
                r.step, r.sigma_bucket, r.loss, r.ema_loss, r.seconds
            ));
        }
        s
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }
}

/// Trains on a dataset directory for `cfg.epochs` passes. Samples are
/// z-normalized with the manifest statistics; shuffling, noise draws and
/// dropout all derive from `cfg.seed`.
pub fn train(
    model: &mut DenoiserModel,
    adam: &mut Adam,
    dataset_dir: &Path,
    noising_spec: &CovarianceSpec,
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let manifest = DatasetManifest::read(dataset_dir)?;
    let noising = build_sampler(noising_spec, manifest.grid)?;
    let mut samples = Vec::with_capacity(manifest.n);
    for i in 0..manifest.n {
        samples.push(manifest.normalize(&load_sample(dataset_dir, i)?));
    }
    let total_samples = (manifest.n * cfg.epochs) as f64;
    let warmup = (cfg.warmup_fraction * total_samples).max(1.0);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut seen = 0usize;
    let mut ema_loss = f64::NAN;
    let start = Instant::now();
    'outer: for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..manifest.n).collect();
        // Fisher-Yates with the training stream
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Field> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let lr = cfg.lr * ((seen as f64 + batch.len() as f64) / warmup).min(1.0);
            // geometric-mean noise level this step, derived from a clone of
            // the stream so the draws themselves are unaffected
            let mut probe = rng.clone();
            let bucket = (0..batch.len())
                .map(|_| {
                    let s = sample_sigma(&mut probe, cfg.sigma_min, cfg.sigma_max);
                    probe.gen::<u64>();
                    s.ln()
                })
                .sum::<f64>()
                / batch.len() as f64;
            let loss = train_step(model, adam, &batch, &noising, cfg, &mut rng, lr, step)?;
            seen += batch.len();
            ema_loss = if ema_loss.is_nan() { loss } else { 0.95 * ema_loss + 0.05 * loss };
            log.rows.push(LogRow {
                step,
                sigma_bucket: bucket.exp(),
                loss,
                ema_loss,
                seconds: start.elapsed().as_secs_f64(),
            });
            step += 1;
            if let Some(ms) = max_steps {
                if step >= ms {
                    break 'outer;
                }
            }
        }
    }
    Ok(log)
}

/// A curriculum stage: a dataset directory and the number of epochs to
/// spend on it. Stage resolutions must be nondecreasing.
#[derive(Debug, Clone)]
pub struct CurriculumStage {
    pub dataset_dir: std::path::PathBuf,
    pub epochs: usize,
}

/// Coarse-to-fine training: the same parameters carry over between stages,
/// since every operator in the network is resolution-independent.
pub fn train_curriculum(
    model: &mut DenoiserModel,
    stages: &[CurriculumStage],
    noising_spec: &CovarianceSpec,
    cfg: &TrainConfig,
) -> Result<Vec<TrainLog>> {
    if stages.is_empty() {
        return Err(Error::Config("curriculum needs at least one stage".into()));
    }
    let mut last_res = 0usize;
    for stage in stages {
        let manifest = DatasetManifest::read(&stage.dataset_dir)?;
        if manifest.grid.nx < last_res {
            return Err(Error::Config("curriculum resolutions must be nondecreasing".into()));
        }
        last_res = manifest.grid.nx;
    }
    let mut adam = Adam::new(model);
    let mut logs = Vec::with_capacity(stages.len());
    for (si, stage) in stages.iter().enumerate() {
        let mut stage_cfg = cfg.clone();
        stage_cfg.epochs = stage.epochs;
        stage_cfg.seed = cfg.seed.wrapping_add(si as u64);
        logs.push(train(model, &mut adam, &stage.dataset_dir, noising_spec, &stage_cfg, None)?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{precond, UnoConfig};
    use crate::field::Grid2D;
    use crate::pde::{gen_dataset, PdeKind, PdeSpec};
    use tempfile::tempdir;

    fn tiny_config() -> UnoConfig {
        UnoConfig {
            levels: 2,
            base_channels: 4,
            modes: vec![2, 2],
            in_channels: 2,
            embed_dim: 4,
            sigma_data: 1.0,
        }
    }

    #[test]
    fn sigma_sampling_is_log_uniform() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let n = 20_000;
        let mut draws: Vec<f64> = (0..n).map(|_| sample_sigma(&mut rng, 0.002, 80.0)).collect();
        assert!(draws.iter().all(|&s| (0.002..=80.0).contains(&s)));
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[n / 2];
        let expect = (0.002f64 * 80.0).sqrt(); // 0.4
        assert!((median / expect).ln().abs() < 0.15, "median {median}");
        // one-sample KS against the log-uniform CDF
        let (lo, hi) = (0.002f64.ln(), 80.0f64.ln());
        let mut ks = 0.0f64;
        for (i, &s) in draws.iter().enumerate() {
            let cdf = (s.ln() - lo) / (hi - lo);
            let emp = (i + 1) as f64 / n as f64;
            ks = ks.max((cdf - emp).abs());
        }
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn edm_weight_times_cout_sq_is_one() {
        for sigma in [0.002, 0.1, 1.0, 10.0, 80.0] {
            let pc = precond(sigma, 1.0);
            let w = edm_weight(sigma, 1.0);
            assert!((w * pc.c_out * pc.c_out - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_model_loss_matches_skip_path_formula() {
        let grid = Grid2D::new(8, 8).unwrap();
        let model = DenoiserModel::init(tiny_config(), 3).unwrap();
        let noising = build_sampler(&CovarianceSpec::rbf(0.05), grid).unwrap();
        let clean = noising.sample_channels(11, 1.0, 2);
        let sigma = 0.7;
        let noise = noising.sample_channels(12, sigma, 2);
        let noisy = clean.add(&noise).unwrap();
        // fresh model output is exactly c_skip * y
        let out = model.forward(&noisy, sigma, false).unwrap();
        let pc = precond(sigma, 1.0);
        let expect = noisy.scale(pc.c_skip);
        assert!(out.sub(&expect).unwrap().max_abs() < 1e-12);
        let lambda = edm_weight(sigma, 1.0);
        let n = (2 * grid.len()) as f64;
        let manual = lambda
            * expect
                .sub(&clean)
                .unwrap()
                .values()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
            / n;
        assert!(manual.is_finite() && manual > 0.0);
    }

    #[test]
    fn ema_with_infinite_half_life_is_frozen() {
        let mut model = DenoiserModel::init(tiny_config(), 5).unwrap();
        let before = model.ema.clone();
        for t in model.params.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v += 1.0;
            }
        }
        ema_update(&mut model, 8, f64::INFINITY);
        assert_eq!(model.ema, before);
        ema_update(&mut model, 8, 8.0); // decay 0.5 moves it
        assert_ne!(model.ema, before);
    }

    #[test]
    fn training_reduces_loss_on_tiny_dataset() {
        let dir = tempdir().unwrap();
        let spec = PdeSpec { kind: PdeKind::Poisson, grid: Grid2D::new(8, 8).unwrap() };
        gen_dataset(&spec, &CovarianceSpec::matern_op(3.0, 2.0, 9.0), 16, 7, dir.path()).unwrap();
        let mut model = DenoiserModel::init(tiny_config(), 1).unwrap();
        let mut adam = Adam::new(&mut model);
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            epochs: 25,
            dropout: 0.0,
            ema_half_life_samples: 64.0,
            seed: 9,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &mut adam, dir.path(), &CovarianceSpec::rbf(0.05), &cfg, None).unwrap();
        let first: f64 = log.rows[..8].iter().map(|r| r.loss).sum::<f64>() / 8.0;
        let n = log.rows.len();
        let last: f64 = log.rows[n - 8..].iter().map(|r| r.loss).sum::<f64>() / 8.0;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
        let csv = log.to_csv();
        assert!(csv.starts_with("step,sigma_bucket,loss,ema_loss,seconds\n"));
        assert_eq!(csv.lines().count(), n + 1);
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempdir().unwrap();
        let spec = PdeSpec { kind: PdeKind::Poisson, grid: Grid2D::new(8, 8).unwrap() };
        gen_dataset(&spec, &CovarianceSpec::matern_op(3.0, 2.0, 9.0), 8, 3, dir.path()).unwrap();
        let run = || {
            let mut model = DenoiserModel::init(tiny_config(), 2).unwrap();
            let mut adam = Adam::new(&mut model);
            let cfg = TrainConfig { batch_size: 4, epochs: 2, seed: 5, ..TrainConfig::default() };
            train(&mut model, &mut adam, dir.path(), &CovarianceSpec::rbf(0.05), &cfg, None).unwrap();
            model
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);
    }

    #[test]
    fn non_finite_parameters_yield_typed_error() {
        let grid = Grid2D::new(8, 8).unwrap();
        let mut model = DenoiserModel::init(tiny_config(), 4).unwrap();
        for t in model.params.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v = 1e200;
            }
        }
        let mut adam = Adam::new(&mut model);
        let noising = build_sampler(&CovarianceSpec::rbf(0.05), grid).unwrap();
        let batch = vec![noising.sample_channels(1, 1.0, 2)];
        let cfg = TrainConfig { dropout: 0.0, ..TrainConfig::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let err = train_step(&mut model, &mut adam, &batch, &noising, &cfg, &mut rng, 1e-4, 0).unwrap_err();
        assert_eq!(err.category(), "non-finite-loss");
    }

    #[test]
    fn curriculum_rejects_decreasing_resolution() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let g16 = Grid2D::new(16, 16).unwrap();
        let g8 = Grid2D::new(8, 8).unwrap();
        gen_dataset(&PdeSpec { kind: PdeKind::Poisson, grid: g16 }, &CovarianceSpec::matern_op(3.0, 2.0, 9.0), 2, 1, d1.path()).unwrap();
        gen_dataset(&PdeSpec { kind: PdeKind::Poisson, grid: g8 }, &CovarianceSpec::matern_op(3.0, 2.0, 9.0), 2, 1, d2.path()).unwrap();
        let mut model = DenoiserModel::init(tiny_config(), 1).unwrap();
        let stages = vec![
            CurriculumStage { dataset_dir: d1.path().into(), epochs: 1 },
            CurriculumStage { dataset_dir: d2.path().into(), epochs: 1 },
        ];
        let err = train_curriculum(&mut model, &stages, &CovarianceSpec::rbf(0.05), &TrainConfig::default()).unwrap_err();
        assert_eq!(err.category(), "config");
    }
}
