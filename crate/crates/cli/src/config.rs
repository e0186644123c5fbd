//! Run configuration.
//!
//! A config is a TOML file with optional sections; every key is optional
//! and unknown keys are rejected:
//!
//! ```toml
//! [input]        # image | signal, truth, mask, name
//! [degradation]  # missing_rate, factor, blur_sigma, blur_radius, noise_std
//! [solver]       # tau, r, sigma, lambda0, lambda_up, lambda_down, lambda_cadence,
//!                # lambda_mode ("balance" | "cap"), lambda_ceiling, lr0, lr_decay,
//!                # lr_step, max_iters, checkpoint_cadence, hidden_factor, chain,
//!                # linear, rec_scaling ("per-window" | "unscaled" | "mean"),
//!                # z_init ("observed" | "random"), eval_cadence, stop_psnr, preset
//! [output]       # dir, report
//! [lorenz]       # steps, dt, burn_in, sigma_l, rho, beta, initial, component,
//!                # noise_std, missing_rate, occlusions = [[start, len], ...]
//! [manifold]     # rows, cols
//! [sweep]        # tau, r, sigma, missing_rate: lists expanded as a product
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use mmes_core::autoencoder::AeMode;
use mmes_core::solver::{LambdaMode, RecScaling, SolverConfig, ZInit};
use mmes_core::EmbedShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Complete,
    SuperResolve,
    Deblur,
    Denoise,
    ToyLorenz,
    ManifoldExport,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Complete => "complete",
            Task::SuperResolve => "super-resolve",
            Task::Deblur => "deblur",
            Task::Denoise => "denoise",
            Task::ToyLorenz => "toy-lorenz",
            Task::ManifoldExport => "manifold-export",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub input: InputSection,
    #[serde(default)]
    pub degradation: DegradationSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub lorenz: LorenzSection,
    #[serde(default)]
    pub manifold: ManifoldSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    /// Observed image; synthesized from `truth` when absent.
    pub image: Option<PathBuf>,
    pub signal: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Label used in reports.
    pub name: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSection {
    pub missing_rate: Option<f64>,
    pub factor: Option<usize>,
    pub blur_sigma: Option<f64>,
    pub blur_radius: Option<usize>,
    pub noise_std: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum TauSpec {
    Uniform(usize),
    PerMode(Vec<usize>),
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub tau: Option<TauSpec>,
    pub r: Option<usize>,
    pub sigma: Option<f64>,
    pub lambda0: Option<f64>,
    pub lambda_up: Option<f64>,
    pub lambda_down: Option<f64>,
    pub lambda_cadence: Option<usize>,
    pub lambda_mode: Option<String>,
    pub lambda_ceiling: Option<f64>,
    pub lr0: Option<f64>,
    pub lr_decay: Option<f64>,
    pub lr_step: Option<usize>,
    pub max_iters: Option<usize>,
    pub checkpoint_cadence: Option<usize>,
    pub hidden_factor: Option<usize>,
    pub chain: Option<Vec<usize>>,
    pub linear: Option<bool>,
    pub rec_scaling: Option<String>,
    pub z_init: Option<String>,
    pub eval_cadence: Option<usize>,
    pub stop_psnr: Option<f64>,
    /// Named completion preset selecting `(τ, r)` by image and missing rate.
    pub preset: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorenzSection {
    pub steps: Option<usize>,
    pub dt: Option<f64>,
    pub burn_in: Option<usize>,
    pub sigma_l: Option<f64>,
    pub rho: Option<f64>,
    pub beta: Option<f64>,
    pub initial: Option<[f64; 3]>,
    pub component: Option<usize>,
    pub noise_std: Option<f64>,
    pub missing_rate: Option<f64>,
    pub occlusions: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSection {
    pub rows: Option<usize>,
    pub cols: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub tau: Option<Vec<usize>>,
    pub r: Option<Vec<usize>>,
    pub sigma: Option<Vec<f64>>,
    pub missing_rate: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Input paths are relative to the config file.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.input.image,
            &mut self.input.signal,
            &mut self.input.truth,
            &mut self.input.mask,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// `(τ, r)` for completion presets, indexed by missing rate:
/// 50%, 70%, 90%, 95%, 99%.
const COMPLETION_PRESETS: &[(&str, [(usize, usize); 5])] = &[
    ("airplane", [(16, 4), (16, 4), (16, 4), (16, 4), (8, 32)]),
    ("baboon", [(10, 4), (10, 4), (4, 8), (4, 6), (4, 4)]),
    ("barbara", [(6, 4), (6, 4), (6, 4), (6, 4), (6, 4)]),
    ("facade", [(10, 4), (16, 4), (16, 4), (16, 4), (4, 1)]),
    ("house", [(16, 4), (16, 4), (16, 4), (16, 4), (8, 16)]),
    ("lena", [(6, 4), (6, 4), (8, 4), (6, 8), (10, 32)]),
    ("peppers", [(6, 4), (16, 4), (16, 4), (16, 4), (8, 8)]),
    ("sailboat", [(6, 4), (6, 4), (4, 4), (6, 8), (6, 4)]),
];

pub fn completion_preset(name: &str, missing_rate: f64) -> Option<(usize, usize)> {
    let (_, row) = COMPLETION_PRESETS.iter().find(|(n, _)| *n == name.to_ascii_lowercase())?;
    let rates = [0.5, 0.7, 0.9, 0.95, 0.99];
    let k = rates
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - missing_rate).abs().total_cmp(&(b.1 - missing_rate).abs()))?
        .0;
    Some(row[k])
}

pub struct TaskDefaults {
    pub tau: usize,
    pub r: usize,
    pub sigma: f64,
    pub hidden_factor: usize,
}

pub fn task_defaults(task: Task, factor: usize) -> TaskDefaults {
    let d = |tau, r, sigma, hidden_factor| TaskDefaults {
        tau,
        r,
        sigma,
        hidden_factor,
    };
    match task {
        Task::Complete => d(6, 4, 0.05, 8),
        Task::SuperResolve if factor >= 8 => d(6, 16, 0.1, 8),
        Task::SuperResolve => d(6, 32, 0.1, 8),
        Task::Deblur => d(4, 16, 0.01, 32),
        Task::Denoise => d(6, 36, 0.05, 8),
        Task::ToyLorenz => d(64, 3, 0.05, 8),
        Task::ManifoldExport => d(8, 2, 0.05, 8),
    }
}

/// Solver settings for a task whose signal has `ndim` embedded modes.
pub fn solver_config(task: Task, run: &RunConfig, ndim: usize, seed: u64) -> Result<SolverConfig, ConfigError> {
    let s = &run.solver;
    let factor = run.degradation.factor.unwrap_or(4);
    let defaults = task_defaults(task, factor);
    let (mut tau_default, mut r_default) = (defaults.tau, defaults.r);
    if let Some(name) = &s.preset {
        let rate = run.degradation.missing_rate.unwrap_or(0.5);
        let (t, r) = completion_preset(name, rate).ok_or_else(|| invalid(format!("unknown preset {name:?}")))?;
        tau_default = t;
        r_default = r;
    }
    let tau = match &s.tau {
        None => vec![tau_default; ndim],
        Some(TauSpec::Uniform(t)) => vec![*t; ndim],
        Some(TauSpec::PerMode(v)) if v.len() == ndim => v.clone(),
        Some(TauSpec::PerMode(v)) => return Err(invalid(format!("tau has {} entries for {ndim} modes", v.len()))),
    };
    let tau = EmbedShape::new(tau).map_err(|e| invalid(e.to_string()))?;
    let mut cfg = SolverConfig::new(tau, s.r.unwrap_or(r_default), s.sigma.unwrap_or(defaults.sigma));
    cfg.seed = seed;
    cfg.hidden_factor = s.hidden_factor.unwrap_or(defaults.hidden_factor);
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = s.$field { cfg.$field = v; })* };
    }
    set!(lambda0, lambda_up, lambda_down, lambda_cadence, lr0, lr_decay, lr_step, max_iters, checkpoint_cadence, eval_cadence);
    cfg.chain = s.chain.clone();
    cfg.stop_psnr = s.stop_psnr;
    if s.linear == Some(true) {
        cfg.ae_mode = AeMode::Linear;
    }
    cfg.lambda_mode = match s.lambda_mode.as_deref() {
        None | Some("balance") => LambdaMode::Balance,
        Some("cap") => LambdaMode::Cap {
            ceiling: s.lambda_ceiling.ok_or_else(|| invalid("lambda_mode = \"cap\" needs lambda_ceiling"))?,
        },
        Some(other) => return Err(invalid(format!("unknown lambda_mode {other:?}"))),
    };
    cfg.rec_scaling = match s.rec_scaling.as_deref() {
        None | Some("per-window") => RecScaling::PerWindow,
        Some("unscaled") => RecScaling::Unscaled,
        Some("mean") => RecScaling::Mean,
        Some(other) => return Err(invalid(format!("unknown rec_scaling {other:?}"))),
    };
    cfg.z_init = match s.z_init.as_deref() {
        None | Some("observed") => ZInit::Observed,
        Some("random") => ZInit::Random,
        Some(other) => return Err(invalid(format!("unknown z_init {other:?}"))),
    };
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cfg)
}

/// One point of a sweep: overrides applied on top of the base config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepPoint {
    pub tau: Option<usize>,
    pub r: Option<usize>,
    pub sigma: Option<f64>,
    pub missing_rate: Option<f64>,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.tau {
            parts.push(format!("tau{t}"));
        }
        if let Some(r) = self.r {
            parts.push(format!("r{r}"));
        }
        if let Some(s) = self.sigma {
            parts.push(format!("sigma{s}"));
        }
        if let Some(m) = self.missing_rate {
            parts.push(format!("rho{m}"));
        }
        parts.join("_")
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.sweep = None;
        if let Some(t) = self.tau {
            cfg.solver.tau = Some(TauSpec::Uniform(t));
        }
        if let Some(r) = self.r {
            cfg.solver.r = Some(r);
        }
        if let Some(s) = self.sigma {
            cfg.solver.sigma = Some(s);
        }
        if let Some(m) = self.missing_rate {
            cfg.degradation.missing_rate = Some(m);
            cfg.lorenz.missing_rate = Some(m);
        }
        cfg
    }
}

/// Cartesian product of the sweep lists in `tau, r, sigma, missing_rate` order.
pub fn expand_sweep(s: &SweepSection) -> Vec<SweepPoint> {
    fn axis<T: Copy>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
        match v {
            Some(v) if !v.is_empty() => v.iter().copied().map(Some).collect(),
            _ => vec![None],
        }
    }
    let mut out = Vec::new();
    for &tau in &axis(&s.tau) {
        for &r in &axis(&s.r) {
            for &sigma in &axis(&s.sigma) {
                for &missing_rate in &axis(&s.missing_rate) {
                    out.push(SweepPoint {
                        tau,
                        r,
                        sigma,
                        missing_rate,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 3
            [input]
            truth = "a.png"
            [solver]
            tau = [6, 4]
            r = 8
            lambda_mode = "cap"
            lambda_ceiling = 2.0
            [sweep]
            r = [2, 4]
            sigma = [0.01, 0.05, 0.1]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        let sc = solver_config(Task::Complete, &cfg, 2, 3).unwrap();
        assert_eq!(sc.tau.as_slice(), &[6, 4]);
        assert_eq!(sc.r, 8);
        assert_eq!(sc.lambda_mode, LambdaMode::Cap { ceiling: 2.0 });
        assert_eq!(expand_sweep(cfg.sweep.as_ref().unwrap()).len(), 6);

        assert!(RunConfig::from_toml("[solver]\nrr = 3\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn task_defaults_fill_solver() {
        let cfg = RunConfig::default();
        let sr8 = RunConfig {
            degradation: DegradationSection {
                factor: Some(8),
                ..Default::default()
            },
            ..Default::default()
        };
        let c = solver_config(Task::SuperResolve, &cfg, 2, 0).unwrap();
        assert_eq!((c.tau.as_slice(), c.r, c.sigma), (&[6, 6][..], 32, 0.1));
        let c = solver_config(Task::SuperResolve, &sr8, 2, 0).unwrap();
        assert_eq!(c.r, 16);
        let c = solver_config(Task::Deblur, &cfg, 2, 0).unwrap();
        assert_eq!((c.tau.as_slice(), c.r, c.sigma, c.hidden_factor), (&[4, 4][..], 16, 0.01, 32));
        let c = solver_config(Task::Denoise, &cfg, 2, 0).unwrap();
        assert_eq!((c.r, c.sigma), (36, 0.05));
        assert_eq!(c.max_iters, 20000);
    }

    #[test]
    fn presets() {
        assert_eq!(completion_preset("lena", 0.9), Some((8, 4)));
        assert_eq!(completion_preset("Airplane", 0.99), Some((8, 32)));
        assert_eq!(completion_preset("nope", 0.5), None);
    }

    #[test]
    fn invalid_values_are_reported() {
        let cfg = RunConfig::from_toml("[solver]\nlambda_mode = \"sometimes\"\n").unwrap();
        assert!(solver_config(Task::Complete, &cfg, 2, 0).is_err());
        let cfg = RunConfig::from_toml("[solver]\ntau = [3]\n").unwrap();
        assert!(solver_config(Task::Complete, &cfg, 2, 0).is_err());
        let cfg = RunConfig::from_toml("[solver]\nr = 40\n").unwrap();
        assert!(solver_config(Task::Complete, &cfg, 2, 0).is_err());
    }
}
