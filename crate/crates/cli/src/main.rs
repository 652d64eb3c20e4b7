//! `psido`: config-driven trace-expansion experiments on the torus.
//!
//! Exit status is 0 when every verification passes, 1 when one fails and 2 on
//! errors (bad config, violated hypotheses, I/O).

mod config;
mod output;
mod run;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use config::ExperimentConfig;
use output::{prediction_csv, write_atomic};
use psido::funcalc::HsGrid;
use psido::selftest::{hs_engine_check, run_selftest, Fault};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "psido", version, about = "Trace expansions of pseudodifferential operators on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config; repeat to run several.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Output directory (overrides [output] dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    t_min: Option<f64>,
    #[arg(long, global = true)]
    t_max: Option<f64>,
    #[arg(long, global = true)]
    t_count: Option<usize>,
    /// Number of ladder terms in the prediction.
    #[arg(long, global = true)]
    order: Option<usize>,
    /// Relative tolerance for coefficient comparison.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Worker threads for lattice sums and eigensolves.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// res(A), TR(A) and tr(A) where defined.
    Residue,
    /// Predicted expansion of the trace as CSV.
    Predict,
    /// Oracle against prediction; PASS/FAIL report, CSVs and plots.
    Verify,
    /// Invariant suites of the symbol calculus.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Corrupt a table to check that the suites can fail.
        #[arg(long)]
        inject_fault: Option<FaultArg>,
    },
    /// Helffer–Sjöstrand engine checks.
    HsCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Moments,
}

fn load(cli: &Cli, path: &Path, many: bool) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(out) = &cli.out {
        cfg.output.dir = if many { out.join(path.file_stem().unwrap_or_default()) } else { out.clone() };
    }
    let r = &mut cfg.run;
    if let Some(v) = cli.t_min {
        r.t_min = config::TBound::Value(v);
    }
    if let Some(v) = cli.t_max {
        r.t_max = config::TBound::Value(v);
    }
    if let Some(v) = cli.t_count {
        r.t_count = v;
    }
    if let Some(v) = cli.order {
        r.order = v;
    }
    if let Some(v) = cli.tol {
        if v <= 0.0 {
            bail!("--tol must be positive");
        }
        r.tol = v;
    }
    if let Some(v) = cli.threads {
        r.threads = Some(v);
    }
    // Overrides go through the parser again so they meet the same checks.
    ExperimentConfig::parse(&cfg.serialize()).context("after command-line overrides")
}

fn configs(cli: &Cli) -> Result<Vec<ExperimentConfig>> {
    if cli.config.is_empty() {
        bail!("this command needs --config PATH");
    }
    let many = cli.config.len() > 1;
    cli.config.iter().map(|p| load(cli, p, many)).collect()
}

fn set_threads(k: Option<usize>) {
    if let Some(k) = k {
        // A second call fails harmlessly once the pool exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
}

fn save(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join(name), text).with_context(|| format!("writing {name}"))
}

fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Selftest { seed, inject_fault } => {
            set_threads(cli.threads);
            let fault = match inject_fault {
                Some(FaultArg::Moments) => Fault::Moments,
                None => Fault::None,
            };
            let results = run_selftest(*seed, fault);
            for r in &results {
                println!("{}", r.line());
            }
            let pass = results.iter().all(|r| r.pass);
            println!("selftest: {}", if pass { "PASS" } else { "FAIL" });
            Ok(pass)
        }
        Command::HsCheck { seed } => {
            set_threads(cli.threads);
            let results = hs_engine_check(*seed, &HsGrid::default());
            for r in &results {
                println!("{}", r.line());
            }
            let pass = results.iter().all(|r| r.pass);
            println!("hs-check: {}", if pass { "PASS" } else { "FAIL" });
            Ok(pass)
        }
        Command::Residue => {
            for cfg in configs(cli)? {
                let report = run::cmd_residue(&cfg)?;
                print!("{report}");
                save(&cfg.output.dir, "residue.txt", &report)?;
            }
            Ok(true)
        }
        Command::Predict => {
            for cfg in configs(cli)? {
                let pred = run::cmd_predict(&cfg)?;
                let csv = prediction_csv(&pred);
                print!("{csv}");
                save(&cfg.output.dir, "prediction.csv", &csv)?;
                save(&cfg.output.dir, "prediction.txt", &run::predict_report(&cfg, &pred))?;
            }
            Ok(true)
        }
        Command::Verify => {
            let cfgs = configs(cli)?;
            set_threads(cli.threads.or(cfgs[0].run.threads));
            let mut all = true;
            for cfg in &cfgs {
                let started = std::time::Instant::now();
                let outcome = run::cmd_verify(cfg, &cfg.output.dir)?;
                print!("{}", outcome.report);
                eprintln!("{} in {:.2}s -> {}", if outcome.pass { "PASS" } else { "FAIL" }, started.elapsed().as_secs_f64(), cfg.output.dir.display());
                all &= outcome.pass;
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
