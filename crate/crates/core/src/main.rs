use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use nclt::experiments::{
    run_experiment, sweep, validate_conditions, write_outputs, CheckStatus, ExperimentConfig, ExperimentError,
    ExperimentKind,
};

/// Runs Berry–Esseen certificate experiments from a JSON config.
#[derive(Parser, Debug)]
#[command(name = "nclt", version)]
struct Cli {
    /// bound | distance | asgd_rates | mest_rates | shell_check | sweep | validate
    experiment: String,
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides NCLT_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write per-replication values in long format.
    #[arg(long)]
    keep_raw: bool,
}

fn resolve_seed(cli: Option<u64>, cfg: u64) -> Result<u64, ExperimentError> {
    if let Some(s) = cli {
        return Ok(s);
    }
    match std::env::var("NCLT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| ExperimentError::Validation(format!("NCLT_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(cfg),
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(ExperimentError::Validation("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| ExperimentError::Numerical(format!("thread pool: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    cfg.seed = resolve_seed(cli.seed, cfg.seed)?;

    if cli.experiment == "validate" {
        let report = validate_conditions(&cfg);
        for c in &report.checks {
            let tag = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Warn => "warn",
            };
            println!("{tag:4} {:12} {}", c.condition, c.detail);
        }
        return Ok(());
    }

    let started = Instant::now();
    let out = if cli.experiment == "sweep" {
        sweep(&cfg)?
    } else {
        let kind = ExperimentKind::parse(&cli.experiment)
            .ok_or_else(|| ExperimentError::Validation(format!("unknown experiment {:?}", cli.experiment)))?;
        run_experiment(kind, &cfg)?
    };
    let meta = json!({
        "seed": cfg.seed,
        "replications": cfg.replications,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    });
    let files = write_outputs(&out, &cli.out, cli.keep_raw, meta)?;
    eprintln!("wrote {}", files.csv.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nclt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
