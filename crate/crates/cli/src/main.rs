//! `mmes <task> --config <path> [--seed N] [--threads N] [--out DIR]`
//!
//! Exit status: 0 on success, 1 on a runtime error, 2 on a usage or config error.

mod config;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{RunConfig, Task};

#[derive(Debug, Parser)]
#[command(name = "mmes", version, about = "Tensor reconstruction by manifold modeling in embedded space")]
struct Cli {
    task: Task,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cfg = match RunConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("mmes: {}: {e}", cli.config.display());
            return ExitCode::from(2);
        }
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("mmes-out"));
    match tasks::run(cli.task, &cfg, seed, cli.threads, &out) {
        Ok(reports) => {
            for r in reports {
                let metric = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{} {} {} psnr {} ssim {} mse {} iters {} {:.1}s",
                    r.task,
                    r.image,
                    r.label,
                    metric(r.psnr_db),
                    metric(r.ssim),
                    metric(r.mse),
                    r.iters,
                    r.seconds
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mmes: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
