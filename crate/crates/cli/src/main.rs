//! `geoflow --config run.conf --out results/` runs one experiment and writes its CSV
//! artifacts plus `summary.json`.
//!
//! Exit codes: 0 on success, 1 for invalid input (no artifacts are written), 2 when a
//! numerical check fails or the library reports a numerical failure.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use commands::{Outcome, RunError};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "geoflow", version, about = "Run a geoflow experiment from a config file")]
struct Args {
    /// Run configuration (sectioned `key = value` text).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &Args) -> Result<RunConfig, String> {
    let text = fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| e.to_string())?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    Ok(cfg)
}

fn summary(cfg: &RunConfig, outcome: &Outcome) -> Vec<u8> {
    let failed = outcome.failed_checks();
    let value = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.echo(),
        "status": if failed.is_empty() { "pass" } else { "fail" },
        "checks": outcome.checks,
        "scalars": outcome.scalars,
        "artifacts": outcome.artifacts.keys().collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_vec_pretty(&value).expect("summary serializes");
    text.push(b'\n');
    text
}

fn write_all(dir: &Path, files: &[(&str, &[u8])]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    // dense kernels split reductions by pool size; keeping them sequential makes the
    // output independent of --threads while the outer task loops stay parallel
    faer::set_global_parallelism(faer::Par::Seq);
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }

    let outcome = match commands::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let summary = summary(&cfg, &outcome);
    let mut files: Vec<(&str, &[u8])> = outcome.artifacts.iter().map(|(n, b)| (n.as_str(), b.as_slice())).collect();
    files.push(("summary.json", &summary));
    if let Err(e) = write_all(&args.out, &files) {
        eprintln!("error: writing {}: {e}", args.out.display());
        return ExitCode::from(RunError::from(e).exit_code());
    }

    let failed = outcome.failed_checks();
    for (name, check) in &outcome.checks {
        eprintln!("{} {name}: {}", if check.passed { "ok  " } else { "FAIL" }, check.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: failed checks: {}", failed.join(", "));
        ExitCode::from(2)
    }
}
