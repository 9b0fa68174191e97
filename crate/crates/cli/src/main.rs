//! `ade`: train, evaluate and benchmark energy-based model estimators.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ade_core::bench::{run_suite, BenchOptions, Profile, Suite};
use ade_core::config::{EstimatorKind, RunConfig};
use ade_core::data::{save_csv, DatasetName, DatasetSpec};
use ade_core::run::{datagen, evaluate, run_train, sample_checkpoint, Checkpoint, Metric};
use ade_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ade", version, about = "Energy-based model estimation by adversarial dynamics embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoints and samples.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a fresh held-out draw and print JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<DatasetName>,
        #[arg(long, value_enum, default_value = "mmd")]
        metric: MetricArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a benchmark grid and write aggregated CSV tables.
    Bench {
        #[arg(long, value_enum, default_value = "table2")]
        suite: SuiteArg,
        /// JSON file with benchmark options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        datasets: Option<Vec<DatasetName>>,
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<EstimatorKind>>,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        eval_samples: Option<usize>,
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
    /// Draw samples from a checkpoint's model into a CSV file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short = 'n', default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a dataset's training and held-out draws as CSV.
    Datagen {
        /// Run config whose dataset section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<DatasetName>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Mmd,
    Param,
    Energy,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Table2,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Full,
    Smoke,
}

fn threads() -> Result<usize> {
    match std::env::var("ADE_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("ADE_THREADS must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_none() && cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("run_out"));
            }
            let report = run_train(&cfg, out.as_deref())?;
            println!(
                "trained {} on {} for {} iterations; outputs in {}",
                report.config.estimator,
                report.config.dataset.name,
                report.checkpoint.iteration,
                report.config.out_dir.as_deref().unwrap_or(Path::new(".")).display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            metric,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let metric = match metric {
                MetricArg::Mmd => Metric::Mmd,
                MetricArg::Param => Metric::Param,
                MetricArg::Energy => Metric::Energy,
            };
            let summary = evaluate(&ckpt, dataset, metric, seed, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Bench {
            suite,
            config,
            seeds,
            datasets,
            estimators,
            profile,
            iterations,
            eval_samples,
            out,
        } => {
            let mut opts = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    serde_json::from_str::<BenchOptions>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => BenchOptions::default(),
            };
            let suite = match suite {
                SuiteArg::Table2 => Suite::Table2,
                SuiteArg::Gaussian => Suite::Gaussian,
            };
            if suite == Suite::Gaussian && estimators.is_none() && config.is_none() {
                opts.estimators = vec![EstimatorKind::Ade, EstimatorKind::Cd];
            }
            if let Some(s) = seeds {
                opts.seeds = s;
            }
            if let Some(d) = datasets {
                opts.datasets = d;
            }
            if let Some(e) = estimators {
                opts.estimators = e;
            }
            if let Some(p) = profile {
                opts.profile = match p {
                    ProfileArg::Full => Profile::Full,
                    ProfileArg::Smoke => Profile::Smoke,
                };
            }
            if iterations.is_some() {
                opts.iterations = iterations;
            }
            if eval_samples.is_some() {
                opts.eval_samples = eval_samples;
            }
            opts.workers = threads()?;
            opts.out = Some(out.clone());
            let report = run_suite(suite, &opts)?;
            let (header, rows) = report.table();
            println!("{}", header.join("\t"));
            for r in rows {
                println!("{}", r.join("\t"));
            }
            let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed", report.cells.len());
            }
        }
        Command::Sample { checkpoint, n, seed, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (samples, _) = sample_checkpoint(&ckpt, n, seed)?;
            save_csv(&samples, &out, false)?;
        }
        Command::Datagen {
            config,
            dataset,
            seed,
            out,
        } => {
            let mut spec: DatasetSpec = load_config(config.as_deref())?.dataset;
            if let Some(d) = dataset {
                spec.name = d;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            datagen(&spec, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
