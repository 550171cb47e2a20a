//! `dadsim`: train distributed models, tabulate bandwidth, verify SPI.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 I/O error,
//! 3 verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dadsim_cli::{bandwidth, config::ExperimentConfig, experiment, verify};

#[derive(Parser)]
#[command(name = "dadsim", about = "Distributed auto-differentiation training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare closed-form per-layer bytes with measured counts.
    BenchBandwidth {
        /// Comma-separated square layer widths, e.g. 64,256,1024.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        rank: usize,
        #[arg(long, default_value_t = 4)]
        sites: usize,
    },
    /// Run the SPI-vs-dense-SVD oracle suite.
    SpiVerify {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn classify(err: &str) -> u8 {
    if err.starts_with("io:") {
        EXIT_IO
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap treats --help/--version as errors with success intent.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    match cli.command {
        Command::Train { config } => {
            let cfg = match ExperimentConfig::from_path(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(classify(&e));
                }
            };
            match experiment::run_experiment(&cfg) {
                Ok(result) => {
                    for fold in &result.folds {
                        println!(
                            "fold {}: wrote {} (weight hash {})",
                            fold.fold,
                            fold.csv_path.display(),
                            &fold.final_weight_hash[..16]
                        );
                    }
                    println!("summary: {}", result.summary_path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(classify(&e))
                }
            }
        }
        Command::BenchBandwidth { layers, batch, rank, sites } => {
            if layers.is_empty() || layers.contains(&0) || batch == 0 || rank == 0 || sites == 0 {
                eprintln!("config: layers, batch, rank and sites must be positive");
                return ExitCode::from(EXIT_USAGE);
            }
            if bandwidth::bench_bandwidth(&layers, batch, rank, sites) {
                ExitCode::SUCCESS
            } else {
                eprintln!("measured bytes violate the closed-form model");
                ExitCode::from(EXIT_VERIFY)
            }
        }
        Command::SpiVerify { seeds } => {
            if seeds == 0 {
                eprintln!("config: seeds must be >= 1");
                return ExitCode::from(EXIT_USAGE);
            }
            let report = verify::spi_verify(seeds);
            println!("max full-rank reconstruction error: {:e}", report.max_full_rank_error);
            println!(
                "max true-rank-4 reconstruction error: {:e} (max effective rank {})",
                report.max_low_rank_error, report.max_low_rank_effective
            );
            println!("worst Eckart-Young ratio: {:.6}", report.worst_eckart_young_ratio);
            println!("zero-input factor: {}", if report.zero_input_ok { "ok" } else { "BAD" });
            if report.violations.is_empty() {
                println!("spi-verify: all checks passed over {seeds} seeds");
                ExitCode::SUCCESS
            } else {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                ExitCode::from(EXIT_VERIFY)
            }
        }
    }
}
