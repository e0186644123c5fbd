use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;

use mmes_core::autoencoder::{export_patch_manifold, latent_bounds, LatentGrid, NoiseStream};
use mmes_core::degradation::{make_pixel_mask, make_random_mask};
use mmes_core::dynamics::{corrupt_signal, lorenz_generate, LorenzConfig};
use mmes_core::imaging::{color_problem, mse, psnr, ssim};
use mmes_core::io::{self, MetricReport};
use mmes_core::solver::{Problem, Solver};
use mmes_core::{Degradation, DenseTensor, ModelParams, Reconstruction, SolverConfig};

use crate::config::{expand_sweep, solver_config, ConfigError, RunConfig, Task};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] mmes_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn config_error(msg: impl Into<String>) -> RunError {
    RunError::Config(ConfigError::Invalid(msg.into()))
}

const DEFAULT_OCCLUSIONS: [(usize, usize); 3] = [(400, 80), (1000, 80), (1600, 80)];
const NOISE_SEED_OFFSET: u64 = 0x0B5E_57ED;

/// Runs one task, or every point of its sweep, writing artifacts under `out`.
pub fn run(task: Task, cfg: &RunConfig, seed: u64, threads: usize, out: &Path) -> Result<Vec<MetricReport>, RunError> {
    std::fs::create_dir_all(out)?;
    let report_path = cfg.output.report.clone().unwrap_or_else(|| out.join("report.jsonl"));
    let Some(sweep) = &cfg.sweep else {
        let report = run_single(task, cfg, seed, out, "")?;
        io::append_report(&report, &report_path)?;
        return Ok(vec![report]);
    };
    let points = expand_sweep(sweep);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let (tx, rx) = mpsc::channel::<MetricReport>();
    let writer_path = report_path.clone();
    let writer = std::thread::spawn(move || -> mmes_core::Result<()> {
        for report in rx {
            io::append_report(&report, &writer_path)?;
        }
        Ok(())
    });
    let results: Vec<Result<MetricReport, RunError>> = pool.install(|| {
        points
            .par_iter()
            .map_with(tx, |tx, point| {
                let label = point.label();
                let dir = out.join(if label.is_empty() { "run".to_string() } else { label.clone() });
                std::fs::create_dir_all(&dir)?;
                let report = run_single(task, &point.apply(cfg), seed, &dir, &label)?;
                // the writer only stops once every sender is gone
                let _ = tx.send(report.clone());
                Ok(report)
            })
            .collect()
    });
    writer.join().expect("report writer panicked")?;
    results.into_iter().collect()
}

pub fn run_single(task: Task, cfg: &RunConfig, seed: u64, out: &Path, label: &str) -> Result<MetricReport, RunError> {
    let start = Instant::now();
    let mut report = match task {
        Task::ToyLorenz => lorenz_task(cfg, seed, out)?,
        Task::ManifoldExport => manifold_task(cfg, seed, out)?,
        _ => image_task(task, cfg, seed, out)?,
    };
    report.label = label.to_string();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn input_name(cfg: &RunConfig, fallback: &str) -> String {
    cfg.input.name.clone().unwrap_or_else(|| {
        cfg.input
            .truth
            .as_ref()
            .or(cfg.input.image.as_ref())
            .or(cfg.input.signal.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| fallback.to_string())
    })
}

fn load_opt(path: &Option<PathBuf>) -> Result<Option<DenseTensor>, RunError> {
    Ok(path.as_ref().map(io::load_image).transpose()?)
}

/// The degradation for `task` and the observation it produces.
fn observation(task: Task, cfg: &RunConfig, truth: Option<&DenseTensor>, seed: u64) -> Result<(DenseTensor, Degradation), RunError> {
    let given = load_opt(&cfg.input.image)?;
    let shape = match (&given, truth) {
        (Some(y), _) if task != Task::SuperResolve => y.shape().to_vec(),
        (_, Some(t)) => t.shape().to_vec(),
        (Some(y), None) => y.shape().to_vec(),
        (None, None) => return Err(config_error("[input] needs an image or a truth path")),
    };
    let (ndim, channels) = match shape.len() {
        2 => (2, 1),
        3 if shape[2] == 3 => (3, 3),
        _ => return Err(config_error(format!("unsupported image shape {shape:?}"))),
    };
    let d = &cfg.degradation;
    let f = match task {
        Task::Complete | Task::ManifoldExport => {
            let mask = match &cfg.input.mask {
                Some(p) => {
                    let m = io::load_mask_image(p)?;
                    if channels > 1 && m.shape().len() == 2 {
                        m.broadcast_channels(channels)
                    } else {
                        m
                    }
                }
                None => {
                    let rate = d.missing_rate.unwrap_or(0.5);
                    if channels > 1 {
                        make_pixel_mask(&shape[..2], channels, rate, seed)?
                    } else {
                        make_random_mask(&shape, rate, seed)?
                    }
                }
            };
            Degradation::Mask(mask)
        }
        Task::SuperResolve => Degradation::lanczos_downsample(d.factor.unwrap_or(4), ndim)?,
        Task::Deblur => {
            let sigma = d.blur_sigma.unwrap_or(1.6);
            let radius = d.blur_radius.unwrap_or((3.0 * sigma).ceil() as usize);
            Degradation::gaussian_blur(sigma, radius, ndim)?
        }
        Task::Denoise => Degradation::Identity,
        Task::ToyLorenz => unreachable!("signals are handled separately"),
    };
    let y = match given {
        Some(y) => y,
        None => {
            let truth = truth.expect("shape came from the truth");
            let mut y = f.apply(truth)?;
            let std = match task {
                Task::Denoise => d.noise_std.unwrap_or(0.1),
                _ => d.noise_std.unwrap_or(0.0),
            };
            if std > 0.0 {
                let e = NoiseStream::new(seed.wrapping_add(NOISE_SEED_OFFSET)).sample(1, y.len(), std);
                for (v, n) in y.data_mut().iter_mut().zip(e.data()) {
                    *v += n;
                }
            }
            y
        }
    };
    Ok((y, f))
}

/// Runs the solver, writing a checkpoint every `checkpoint_cadence` iterations.
fn solve(problem: Problem, cfg: &SolverConfig, color: bool, reference: Option<&DenseTensor>, out: &Path) -> Result<Reconstruction, RunError> {
    let solver = Solver::new(problem, cfg, color)?;
    if cfg.checkpoint_cadence == 0 {
        return Ok(solver.run(reference, None)?);
    }
    let dir = out.join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    let mut save = |iter: usize, z: &DenseTensor, p: &ModelParams| -> mmes_core::Result<()> {
        io::save_tensor(z, dir.join(format!("latent_{iter:06}.bin")))?;
        io::save_params(p, dir.join(format!("params_{iter:06}.bin")))
    };
    Ok(solver.run(reference, Some(&mut save))?)
}

fn write_run(res: &Reconstruction, out: &Path) -> Result<(), RunError> {
    io::save_trace(&res.trace, out.join("trace.csv"))?;
    io::save_params(&res.params, out.join("params.bin"))?;
    io::save_tensor(&res.z, out.join("latent.bin"))?;
    Ok(())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn image_report(task: Task, cfg: &RunConfig, res: &Reconstruction, truth: Option<&DenseTensor>, output: &DenseTensor) -> Result<MetricReport, RunError> {
    let (psnr_db, ssim_v, mse_v) = match truth {
        Some(t) if t.shape() == output.shape() => (finite(psnr(output, t, 1.0)?), Some(ssim(output, t)?), Some(mse(output, t)?)),
        _ => (None, None, None),
    };
    Ok(MetricReport {
        task: task.name().to_string(),
        image: input_name(cfg, "image"),
        psnr_db,
        ssim: ssim_v,
        mse: mse_v,
        label: String::new(),
        iters: res.iters,
        seconds: 0.0,
    })
}

fn clamp01(x: &DenseTensor) -> DenseTensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

fn reconstruct_image(task: Task, cfg: &RunConfig, seed: u64, out: &Path) -> Result<(Reconstruction, Problem, Option<DenseTensor>, SolverConfig), RunError> {
    let truth = load_opt(&cfg.input.truth)?;
    let (y, f) = observation(task, cfg, truth.as_ref(), seed)?;
    let solver_cfg = solver_config(task, cfg, 2, seed)?;
    let color = y.ndim() == 3;
    let build = || -> mmes_core::Result<Problem> {
        if color {
            color_problem(&y, &f, &solver_cfg)
        } else {
            Problem::new(&y, &f, &solver_cfg.tau, solver_cfg.rec_scaling)
        }
    };
    let problem = build()?;
    if let Some(t) = &truth {
        if t.shape() != problem.x_shape() {
            return Err(config_error(format!(
                "truth {:?} does not match the reconstruction shape {:?}",
                t.shape(),
                problem.x_shape()
            )));
        }
    }
    io::save_image(&clamp01(&y), out.join("observed.png"))?;
    let res = solve(build()?, &solver_cfg, color, truth.as_ref(), out)?;
    Ok((res, problem, truth, solver_cfg))
}

fn image_task(task: Task, cfg: &RunConfig, seed: u64, out: &Path) -> Result<MetricReport, RunError> {
    let (res, _, truth, _) = reconstruct_image(task, cfg, seed, out)?;
    io::save_image(&clamp01(&res.output), out.join("reconstruction.png"))?;
    if let Some(best) = &res.best {
        io::save_image(&clamp01(&best.output), out.join("best.png"))?;
    }
    write_run(&res, out)?;
    image_report(task, cfg, &res, truth.as_ref(), &res.output)
}

fn manifold_task(cfg: &RunConfig, seed: u64, out: &Path) -> Result<MetricReport, RunError> {
    let (res, problem, truth, solver_cfg) = reconstruct_image(Task::ManifoldExport, cfg, seed, out)?;
    if problem.channels() != 1 || solver_cfg.r != 2 {
        return Err(config_error("manifold export needs a grayscale image and r = 2"));
    }
    let latent = res.params.ae.encode(&problem.embed(&res.z))?;
    let (lo, hi) = latent_bounds(&latent);
    let rows = cfg.manifold.rows.unwrap_or(16);
    let cols = cfg.manifold.cols.unwrap_or(16);
    let grid = LatentGrid::spanning([lo[0], lo[1]], [hi[0], hi[1]], rows, cols)?;
    let tau = solver_cfg.tau.as_slice();
    let montage = export_patch_manifold(&res.params.ae, &grid, (tau[0], tau[1]))?;
    io::save_image(&clamp01(&montage), out.join("montage.png"))?;
    io::save_image(&clamp01(&res.output), out.join("reconstruction.png"))?;
    write_run(&res, out)?;
    image_report(Task::ManifoldExport, cfg, &res, truth.as_ref(), &res.output)
}

fn lorenz_task(cfg: &RunConfig, seed: u64, out: &Path) -> Result<MetricReport, RunError> {
    let l = &cfg.lorenz;
    let truth = match &cfg.input.signal {
        Some(p) => io::load_signal_csv(p)?,
        None => {
            let defaults = LorenzConfig::default();
            lorenz_generate(&LorenzConfig {
                sigma_l: l.sigma_l.unwrap_or(defaults.sigma_l),
                rho: l.rho.unwrap_or(defaults.rho),
                beta: l.beta.unwrap_or(defaults.beta),
                dt: l.dt.unwrap_or(defaults.dt),
                steps: l.steps.unwrap_or(defaults.steps),
                burn_in: l.burn_in.unwrap_or(defaults.burn_in),
                initial: l.initial.unwrap_or(defaults.initial),
                component: l.component.unwrap_or(defaults.component),
            })?
        }
    };
    let occlusions = l.occlusions.clone().unwrap_or_else(|| DEFAULT_OCCLUSIONS.to_vec());
    let corrupted = corrupt_signal(
        &truth,
        l.noise_std.unwrap_or(0.1),
        l.missing_rate.unwrap_or(0.1),
        &occlusions,
        seed,
    )?;
    if !corrupted.clipped.is_empty() {
        return Err(config_error(format!(
            "occlusions {:?} run past the end of the {}-sample signal",
            corrupted.clipped,
            truth.len()
        )));
    }
    let solver_cfg = solver_config(Task::ToyLorenz, cfg, 1, seed)?;
    let f = Degradation::Mask(corrupted.mask.clone());
    let problem = Problem::new(&corrupted.y, &f, &solver_cfg.tau, solver_cfg.rec_scaling)?;
    let res = solve(problem, &solver_cfg, false, None, out)?;
    io::save_signal_csv(&truth, out.join("truth.csv"))?;
    io::save_signal_csv(&corrupted.y, out.join("observed.csv"))?;
    io::save_mask_csv(&corrupted.mask, out.join("mask.csv"))?;
    io::save_signal_csv(&res.output, out.join("reconstruction.csv"))?;
    write_run(&res, out)?;
    Ok(MetricReport {
        task: Task::ToyLorenz.name().to_string(),
        image: input_name(cfg, "lorenz"),
        psnr_db: finite(psnr(&res.output, &truth, 2.0)?),
        ssim: None,
        mse: Some(mse(&res.output, &truth)?),
        label: String::new(),
        iters: res.iters,
        seconds: 0.0,
    })
}
