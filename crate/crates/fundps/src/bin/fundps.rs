//! Command-line entry point: dataset generation, training, guided
//! sampling, evaluation, oracle verification, and image export.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fundps::config::{create_run_dir, parse_covariance, parse_pde, ConfigMap};
use fundps::denoiser::{Denoiser, DenoiserModel, UnoConfig};
use fundps::error::{Error, Result};
use fundps::field::{self, Field, Grid2D};
use fundps::grf::build_sampler;
use fundps::metrics::{binary_error, eval_csv, rel_l2, EvalResult, BINARY_THRESHOLD};
use fundps::oracle::{verify_tweedie_resolution_sweep, SpectralGaussianDenoiser};
use fundps::pde::{gen_dataset, load_sample, DatasetManifest, PdeSpec};
use fundps::sampler::{
    fundps_sample, karras_schedule, solve_task, ChannelAffine, ObsLoss, TaskKind,
};
use fundps::training::{train_curriculum, CurriculumStage, TrainConfig};

const USAGE: &str = "usage: fundps <gen-data|train|sample|eval|verify|export-image> \
[--config FILE] [--key value]...";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: category={} message={:?}", e.category(), format!("{e}"));
            std::process::exit(1);
        }
    }
}

fn run(args: &[String]) -> Result<()> {
    let cmd = args.first().ok_or_else(|| Error::Config(USAGE.into()))?;
    let cfg = load_config(&args[1..])?;
    match cmd.as_str() {
        "gen-data" => cmd_gen_data(cfg),
        "train" => cmd_train(cfg),
        "sample" => cmd_sample(cfg),
        "eval" => cmd_eval(cfg),
        "verify" => cmd_verify(cfg),
        "export-image" => cmd_export_image(cfg),
        other => Err(Error::Config(format!("unknown command {other}; {USAGE}"))),
    }
}

/// Reads `--config FILE` if present, then applies all remaining flags as
/// overrides.
fn load_config(args: &[String]) -> Result<ConfigMap> {
    let mut rest: Vec<String> = Vec::new();
    let mut file: Option<PathBuf> = None;
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" {
            i += 1;
            let p = args
                .get(i)
                .ok_or_else(|| Error::Config("--config needs a file path".into()))?;
            file = Some(PathBuf::from(p));
        } else if let Some(p) = args[i].strip_prefix("--config=") {
            file = Some(PathBuf::from(p));
        } else {
            rest.push(args[i].clone());
        }
        i += 1;
    }
    let mut cfg = match file {
        Some(p) => ConfigMap::parse_file(&p)?,
        None => ConfigMap::new(),
    };
    cfg.apply_overrides(&rest)?;
    Ok(cfg)
}

fn grid_from(cfg: &ConfigMap) -> Result<Grid2D> {
    let res: usize = cfg.require("resolution")?;
    Grid2D::new(res, res)
}

fn cmd_gen_data(cfg: ConfigMap) -> Result<()> {
    cfg.check_keys(&["seed", "pde", "resolution", "n", "prior", "out"])?;
    let seed: u64 = cfg.require("seed")?;
    let kind = parse_pde(cfg.raw("pde").unwrap_or("poisson"))?;
    let grid = grid_from(&cfg)?;
    let n: usize = cfg.require("n")?;
    let prior = parse_covariance(cfg.raw("prior").unwrap_or("matern_op:3,2,9"))?;
    let out = PathBuf::from(cfg.raw("out").unwrap_or("dataset"));
    let spec = PdeSpec { kind, grid };
    let manifest = gen_dataset(&spec, &prior, n, seed, &out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    println!(
        "generated {} samples of {} at {}x{} in {}",
        manifest.n, manifest.pde, grid.ny, grid.nx,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: ConfigMap) -> Result<()> {
    cfg.check_keys(&[
        "seed", "dataset", "epochs", "lr", "batch_size", "dropout", "sigma_min",
        "sigma_max", "ema_half_life", "warmup_fraction", "noising", "out",
        "levels", "base_channels", "modes", "embed_dim", "sigma_data", "init_checkpoint",
    ])?;
    let seed: u64 = cfg.require("seed")?;
    let datasets: Vec<PathBuf> = cfg
        .require::<String>("dataset")?
        .split(',')
        .map(PathBuf::from)
        .collect();
    let epochs: Vec<usize> = cfg
        .get_or::<String>("epochs", "1".into())?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad epochs entry {s:?}"))))
        .collect::<Result<_>>()?;
    if epochs.len() != datasets.len() {
        return Err(Error::Config("epochs list must match the dataset list".into()));
    }
    let noising = parse_covariance(cfg.raw("noising").unwrap_or("rbf:0.05"))?;
    let tc = TrainConfig {
        lr: cfg.get_or("lr", 1e-4)?,
        batch_size: cfg.get_or("batch_size", 8)?,
        epochs: 1,
        dropout: cfg.get_or("dropout", 0.13)?,
        sigma_min: cfg.get_or("sigma_min", 0.002)?,
        sigma_max: cfg.get_or("sigma_max", 80.0)?,
        ema_half_life_samples: cfg.get_or("ema_half_life", 500.0)?,
        warmup_fraction: cfg.get_or("warmup_fraction", 0.1)?,
        seed,
    };
    let mut model = match cfg.raw("init_checkpoint") {
        Some(p) => DenoiserModel::load(Path::new(p))?,
        None => {
            let uc = UnoConfig {
                levels: cfg.get_or("levels", 2)?,
                base_channels: cfg.get_or("base_channels", 32)?,
                modes: cfg
                    .get_or::<String>("modes", "12,6".into())?
                    .split(',')
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("bad modes entry {s:?}"))))
                    .collect::<Result<_>>()?,
                in_channels: 2,
                embed_dim: cfg.get_or("embed_dim", 16)?,
                sigma_data: cfg.get_or("sigma_data", 1.0)?,
            };
            DenoiserModel::init(uc, seed)?
        }
    };
    let run_dir = create_run_dir(Path::new(cfg.raw("out").unwrap_or("runs")), seed, &cfg)?;
    let stages: Vec<CurriculumStage> = datasets
        .iter()
        .zip(&epochs)
        .map(|(d, &e)| CurriculumStage { dataset_dir: d.clone(), epochs: e })
        .collect();
    let logs = train_curriculum(&mut model, &stages, &noising, &tc)?;
    for (i, log) in logs.iter().enumerate() {
        std::fs::write(run_dir.join(format!("train_stage{i}.csv")), log.to_csv())?;
    }
    let ckpt = run_dir.join("model.ckpt");
    model.save(&ckpt)?;
    let last = logs.last().and_then(|l| l.rows.last());
    println!(
        "trained {} stage(s); final loss {:.4e}; checkpoint {}",
        logs.len(),
        last.map(|r| r.ema_loss).unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn cmd_sample(cfg: ConfigMap) -> Result<()> {
    cfg.check_keys(&[
        "seed", "dataset", "sample_index", "task", "obs_fraction", "checkpoint",
        "denoiser", "prior", "noising", "steps", "sigma_min", "sigma_max", "rho",
        "zeta_obs", "zeta_pde", "obs_loss", "huber_delta", "pde_guidance", "out",
    ])?;
    let seed: u64 = cfg.require("seed")?;
    let dataset = PathBuf::from(cfg.require::<String>("dataset")?);
    let manifest = DatasetManifest::read(&dataset)?;
    let idx: usize = cfg.get_or("sample_index", 0)?;
    let truth = load_sample(&dataset, idx)?;
    let truth_norm = manifest.normalize(&truth);

    let kind = TaskKind::from_str(cfg.raw("task").unwrap_or("recover"))?;
    let mut task = solve_task(kind, &truth_norm, cfg.get_or("obs_fraction", 0.03)?, seed)?;
    task.zeta_obs = cfg.get_or("zeta_obs", 1.0)?;
    task.zeta_pde = cfg.get_or("zeta_pde", 0.0)?;
    task.obs_loss = ObsLoss::from_str(cfg.raw("obs_loss").unwrap_or("mse"))?;
    task.huber_delta = cfg.get_or("huber_delta", 1.0)?;
    if cfg.get_or("pde_guidance", false)? {
        task.pde_spec = Some(PdeSpec { kind: parse_pde(&manifest.pde_kind()?)?, grid: manifest.grid });
        task.denorm = Some(
            manifest
                .stats
                .iter()
                .map(|s| ChannelAffine { mean: s.mean, std: s.std })
                .collect(),
        );
    }

    let noising = parse_covariance(cfg.raw("noising").unwrap_or("rbf:0.05"))?;
    let noise_sampler = build_sampler(&noising, manifest.grid)?;
    let schedule = karras_schedule(
        cfg.get_or("steps", 200)?,
        cfg.get_or("sigma_min", 0.002)?,
        cfg.get_or("sigma_max", 80.0)?,
        cfg.get_or("rho", 7.0)?,
    )?;

    let denoiser: Box<dyn Denoiser> = match cfg.raw("denoiser").unwrap_or("checkpoint") {
        "exact" => {
            let prior = parse_covariance(
                cfg.raw("prior")
                    .ok_or_else(|| Error::Config("exact denoiser needs a prior spec".into()))?,
            )?;
            let ps = build_sampler(&prior, manifest.grid)?;
            Box::new(SpectralGaussianDenoiser::from_samplers(&ps, &noise_sampler)?)
        }
        "checkpoint" => {
            let p = cfg
                .raw("checkpoint")
                .ok_or_else(|| Error::Config("missing checkpoint path".into()))?;
            Box::new(DenoiserModel::load(Path::new(p))?)
        }
        other => return Err(Error::Config(format!("unknown denoiser {other}"))),
    };

    let run_dir = create_run_dir(Path::new(cfg.raw("out").unwrap_or("runs")), seed, &cfg)?;
    let recon_norm = fundps_sample(denoiser.as_ref(), &task, &schedule, &noise_sampler, seed)?;
    let recon = manifest.denormalize(&recon_norm);
    field::write_field(&recon, run_dir.join("reconstruction.fgrd"))?;
    field::write_field(&truth, run_dir.join("truth.fgrd"))?;

    let err_a = rel_l2(&recon.extract_channel(0), &truth.extract_channel(0))?;
    let err_u = rel_l2(&recon.extract_channel(1), &truth.extract_channel(1))?;
    println!(
        "sample {idx}: rel_l2(a)={err_a:.4} rel_l2(u)={err_u:.4} run dir {}",
        run_dir.display()
    );
    Ok(())
}

fn cmd_eval(cfg: ConfigMap) -> Result<()> {
    cfg.check_keys(&["reconstruction", "truth", "task", "binary", "out"])?;
    let recon = field::read_field(PathBuf::from(cfg.require::<String>("reconstruction")?))?;
    let truth = field::read_field(PathBuf::from(cfg.require::<String>("truth")?))?;
    let binary = cfg.get_or("binary", false)?;
    let row = EvalResult {
        sample: 0,
        task: cfg.raw("task").unwrap_or("recover").to_string(),
        rel_l2_a: rel_l2(&recon.extract_channel(0), &truth.extract_channel(0))?,
        rel_l2_u: rel_l2(&recon.extract_channel(1), &truth.extract_channel(1))?,
        binary_err: if binary {
            Some(binary_error(
                &recon.extract_channel(0),
                &truth.extract_channel(0),
                BINARY_THRESHOLD,
            )?)
        } else {
            None
        },
    };
    let csv = eval_csv(std::slice::from_ref(&row));
    match cfg.raw("out") {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_verify(cfg: ConfigMap) -> Result<()> {
    cfg.check_keys(&["seed", "prior", "noising", "resolutions", "sigmas", "out"])?;
    let seed: u64 = cfg.require("seed")?;
    let prior = parse_covariance(cfg.raw("prior").unwrap_or("matern_op:3,2,9"))?;
    let noising = parse_covariance(cfg.raw("noising").unwrap_or("rbf:0.05"))?;
    let resolutions: Vec<usize> = cfg
        .get_or::<String>("resolutions", "8,16,32".into())?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad resolution {s:?}"))))
        .collect::<Result<_>>()?;
    let sigmas: Vec<f64> = cfg
        .get_or::<String>("sigmas", "0.1,1.0,10.0".into())?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad sigma {s:?}"))))
        .collect::<Result<_>>()?;
    let report = verify_tweedie_resolution_sweep(&prior, &noising, &resolutions, &sigmas, seed)?;
    let csv = report.to_csv();
    match cfg.raw("out") {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if !report.passes() {
        return Err(Error::Spectrum(
            report
                .rows
                .iter()
                .map(|r| r.max_discrepancy)
                .fold(0.0, f64::max),
        ));
    }
    println!("verification passed ({} rows)", report.rows.len());
    Ok(())
}

fn cmd_export_image(cfg: ConfigMap) -> Result<()> {
    cfg.check_keys(&["input", "out"])?;
    let input = PathBuf::from(cfg.require::<String>("input")?);
    let f: Field = field::read_field(&input)?;
    let stem = cfg.raw("out").map(PathBuf::from).unwrap_or_else(|| input.with_extension(""));
    let paths = field::export_pgm(&f, &stem)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

/// Recovers the PDE kind string stored in the manifest for re-parsing.
trait ManifestPde {
    fn pde_kind(&self) -> Result<String>;
}

impl ManifestPde for DatasetManifest {
    fn pde_kind(&self) -> Result<String> {
        // the manifest stores the Display form; map it back to config syntax
        if self.pde == "poisson" || self.pde == "darcy" {
            Ok(self.pde.clone())
        } else if let Some(k) = self.pde.strip_prefix("helmholtz k=") {
            Ok(format!("helmholtz:{k}"))
        } else {
            Err(Error::Config(format!("manifest has unknown pde {:?}", self.pde)))
        }
    }
}
