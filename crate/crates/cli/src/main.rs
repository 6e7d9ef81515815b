use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use stein_core::config::{parse_compare_config, parse_run_config, parse_validate_config};
use stein_core::experiment::{compare, run_to_dir, validate};
use stein_core::report::RunStatus;
use stein_core::Error;

/// Stein variational samplers: experiment runner.
#[derive(Parser, Debug)]
#[command(name = "stein", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (JSON, schema version 1). `run` also accepts a report.json.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one sampler on one problem.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write scatter_<iter>.svg for two-dimensional problems.
        #[arg(long)]
        plots: bool,
    },
    /// Run several variants of the same problem and compare their moments.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Compare samplers against the analytic linear-Gaussian posterior
    /// across dimensions.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn out_dir(flag: Option<PathBuf>, from_config: Option<&PathBuf>) -> PathBuf {
    flag.or_else(|| from_config.cloned()).unwrap_or_else(|| PathBuf::from("out"))
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("STEIN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .with_context(|| format!("STEIN_THREADS must be a non-negative integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

/// Config errors exit with 2; runtime failures with 1.
fn classify(err: anyhow::Error) -> ExitCode {
    let config = matches!(err.downcast_ref::<Error>(), Some(Error::Config { .. }));
    eprintln!("error: {err:#}");
    ExitCode::from(if config { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn execute(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Run { common, plots } => {
            let mut cfg = parse_run_config(&read(&common.config)?)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let dir = out_dir(common.out_dir, cfg.out_dir.as_ref());
            let outcome = run_to_dir(&cfg, &dir, plots)?;
            let report = &outcome.report;
            if let Some(c) = report.final_checkpoint() {
                println!(
                    "{} iterations in {:.2}s; mean average {:.6}, covariance trace {:.6}",
                    report.iterations_completed, report.timing.total_seconds, c.summary.mean_average, c.summary.cov_trace
                );
            }
            println!("wrote {}", dir.join("report.json").display());
            if report.status == RunStatus::Incomplete {
                eprintln!("error: run incomplete: {}", report.error.as_deref().unwrap_or("unknown failure"));
                return Ok(false);
            }
            Ok(true)
        }
        Command::Compare { common } => {
            let mut cfg = parse_compare_config(&read(&common.config)?)?;
            if let Some(seed) = common.seed {
                for v in &mut cfg.variants {
                    v.config.seed = seed;
                }
            }
            let dir = out_dir(common.out_dir, cfg.out_dir.as_ref());
            let report = compare(&cfg, Some(&dir))?;
            for p in &report.pairwise {
                println!(
                    "{} vs {}: mean {:.3e}, trace {:.3e}, covariance {:.3e}",
                    p.a, p.b, p.mean_rel_diff, p.cov_trace_rel_diff, p.cov_frobenius_rel_diff
                );
            }
            println!("wrote {}", dir.join("comparison.json").display());
            let failed: Vec<_> = report.variants.iter().filter(|v| v.status == RunStatus::Incomplete).collect();
            for v in &failed {
                eprintln!("error: variant {} incomplete: {}", v.label, v.error.as_deref().unwrap_or(""));
            }
            Ok(failed.is_empty())
        }
        Command::Validate { common } => {
            let mut cfg = parse_validate_config(&read(&common.config)?)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let dir = out_dir(common.out_dir, cfg.out_dir.as_ref());
            let tables = validate(&cfg, Some(&dir))?;
            let fmt = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
            println!("{:>14} {}", "d", tables.dims.iter().map(|d| format!("{d:>10}")).collect::<String>());
            for (name, rows) in [("mean average", &tables.mean_average), ("trace", &tables.trace)] {
                println!("{name}");
                for r in rows {
                    println!("{:>14} {}", r.label, r.values.iter().map(|v| format!("{:>10}", fmt(v))).collect::<String>());
                }
            }
            println!("wrote {}", dir.join("tables.json").display());
            for f in &tables.failures {
                eprintln!("error: {f}");
            }
            Ok(tables.failures.is_empty())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        return classify(e);
    }
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => classify(e),
    }
}
