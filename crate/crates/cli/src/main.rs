use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsplit::experiment::{load_config, probe, run_experiment, self_check, sweep, ExperimentConfig, SweepAxis};
use fedsplit::Error;

/// Federated split learning simulator.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one experiment per value of a hyperparameter.
    Sweep {
        config: PathBuf,
        /// One of K, M, q, fedround, alpha, c, option.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `1,5,10`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Partition and measure heterogeneity without training.
    Probe {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle checks.
    Check {
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

fn load(path: &Path, common: &Common) -> Result<ExperimentConfig, Error> {
    // an unreadable config is the caller's mistake, not a runtime failure
    let mut cfg = load_config(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn reporter(quiet: bool) -> impl FnMut(&str) {
    move |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    }
}

fn execute(command: Command) -> Result<bool, Error> {
    match command {
        Command::Run { config, common } => {
            let cfg = load(&config, &common)?;
            let summary = run_experiment(&cfg, &mut reporter(common.quiet))?;
            println!(
                "final mean test accuracy {:.4} after {} rounds; outputs in {}",
                summary.final_accuracy(),
                summary.metrics.len(),
                summary.out_dir.display()
            );
            if let Some(fa) = summary.fedavg.as_ref().and_then(|m| m.last()) {
                println!("fedavg final mean test accuracy {:.4}", fa.mean_test_accuracy);
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            common,
        } => {
            let cfg = load(&config, &common)?;
            let axis = SweepAxis::parse(&axis)?;
            let runs = sweep(&cfg, axis, &values, &mut reporter(common.quiet))?;
            for (value, summary) in runs {
                println!("{}={value}: final mean test accuracy {:.4}", axis.name(), summary.final_accuracy());
            }
        }
        Command::Probe { config, common } => {
            let cfg = load(&config, &common)?;
            let row = probe(&cfg)?;
            println!(
                "sigma_g2 mean {} max {}  sigma_l2 mean {}  smoothness {}",
                row.sigma_g2_mean, row.sigma_g2_max, row.sigma_l2_mean, row.smoothness_max
            );
        }
        Command::Check { quiet } => {
            let outcomes = self_check();
            let ok = outcomes.iter().all(|c| c.passed);
            for c in &outcomes {
                if !quiet || !c.passed {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
