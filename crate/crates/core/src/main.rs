use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pflsim::estimators::Algorithm;
use pflsim::harness::{self, SweepConfig, TrainAlgo};
use pflsim::theory;
use pflsim::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pflsim",
    version,
    about = "Personalized federated learning in the overparameterized linear model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Asymptotic bias, variance and risk for one algorithm (identity covariance).
    Predict {
        #[arg(long)]
        algo: Algorithm,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        sigma: f64,
        /// Ridge parameter; the optimal value is used when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        /// Signal radius for the naive baselines (defaults to r).
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Exact risk for every algorithm on the base configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact risk over the Cartesian product of the sweep axes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Iterative federated training with a per-step trajectory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        algo: TrainAlgo,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summaries of simulated vs predicted risk per cell and algorithm.
    Compare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn predict(
    algo: Algorithm,
    gamma: f64,
    r: f64,
    sigma: f64,
    lambda: Option<f64>,
    rho: Option<f64>,
    json: bool,
) -> Result<()> {
    let lim = if algo.uses_lambda() && lambda.is_none() {
        match algo {
            Algorithm::NaiveRidge => theory::naive_ridge_optimal(rho.unwrap_or(r), sigma, gamma)?.1,
            _ => {
                let (l, _) = theory::rtfa_optimal(r, sigma, gamma)?;
                theory::predict(algo, gamma, r, sigma, Some(l), rho)?
            }
        }
    } else {
        theory::predict(algo, gamma, r, sigma, lambda, rho)?
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&lim)?);
    } else {
        let lam = lim.lambda.map_or(String::new(), |l| format!("  lambda {l:.6}"));
        println!(
            "{algo}  gamma {gamma}{lam}\nbias     {:.6}\nvariance {:.6}\nrisk     {:.6}",
            lim.bias, lim.variance, lim.risk
        );
    }
    Ok(())
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Predict {
            algo,
            gamma,
            r,
            sigma,
            lambda,
            rho,
            json,
        } => predict(algo, gamma, r, sigma, lambda, rho, json),
        Command::Simulate { config, seed, out } => {
            let cfg = SweepConfig::from_path(&config)?;
            let rows = harness::run_simulate(&cfg, seed)?;
            harness::write_rows(&rows, create(&out)?)?;
            log::info!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Sweep { config, out, jobs } => {
            let cfg = SweepConfig::from_path(&config)?;
            let rows = harness::run_sweep(&cfg, jobs)?;
            harness::write_rows(&rows, create(&out)?)?;
            log::info!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            algo,
            seed,
            out,
        } => {
            let cfg = SweepConfig::from_path(&config)?;
            let rows = harness::run_train(&cfg, algo, seed)?;
            harness::write_traj(&rows, create(&out)?)?;
            if let Some(last) = rows.last() {
                println!(
                    "{} final risk {:.6}, distance to closed form {:.3e}",
                    last.phase, last.risk, last.distance_to_closed_form
                );
            }
            Ok(())
        }
        Command::Compare { input, out } => {
            let rows = harness::read_rows(BufReader::new(File::open(&input)?))?;
            let summary = harness::compare(&rows)?;
            serde_json::to_writer_pretty(create(&out)?, &summary)?;
            print!("{}", harness::format_summary(&summary));
            if !summary.all_pass {
                log::warn!("some cells exceed their tolerance");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.tag());
            match e {
                Error::InvalidConfig(_) | Error::Parse(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
