use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use npinfer::harness::{self, EstimateConfig, RawConfig, SimConfig};
use npinfer::Error;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "npinfer", version, about = "Doubly robust inference for non-probability samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo simulation; reruns in the same directory resume.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "NPINFER_WORKERS")]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the population mean from a reference survey and a sample.
    Estimate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "NPINFER_WORKERS")]
        workers: Option<usize>,
    },
    /// Write synthetic populations built from a reference survey.
    Synthesize {
        #[arg(long)]
        reference: PathBuf,
        /// Population size.
        #[arg(long)]
        n: u64,
        /// Bootstrap replicates and syntheses per replicate.
        #[arg(long, num_args = 2, value_names = ["B", "L"])]
        reps: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Skip the design bootstrap and use the survey weights directly.
        #[arg(long)]
        ignore_design: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::SinglePsuStratum { .. }
        | Error::SampleSize { .. }
        | Error::NonFinite(_)
        | Error::Csv { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, out, workers, seed } => {
            let raw = RawConfig::read(&config)?;
            let mut cfg = SimConfig::from_raw(&raw)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let report = harness::run_simulation(&cfg, &out)?;
            println!(
                "ran {} iteration(s), resumed {}; results in {}",
                report.iterations_run,
                report.iterations_resumed,
                out.display()
            );
            for (outcome, rows) in &report.summaries {
                println!("\n{} outcome", outcome);
                println!("{:<6} {:<4} {:<5} {:<5} {:>9} {:>9} {:>7} {:>8} {:>6}", "method", "scen", "qr", "pm", "rbias", "rmse", "crci", "rlci", "rse");
                for r in rows {
                    let m = &r.metrics;
                    println!(
                        "{:<6} {:<4} {:<5} {:<5} {:>9.3} {:>9.3} {:>7.1} {:>8.3} {:>6.3}",
                        r.method, r.scenario, r.qr_spec, r.pm_spec, m.rbias, m.rmse, m.crci, m.rlci, m.rse
                    );
                }
            }
        }
        Command::Estimate { reference, sample, config, out, workers } => {
            let mut cfg = EstimateConfig::read(&config)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if cfg.workers == 0 {
                return Err(Error::Config("workers must be positive".into()));
            }
            let results = harness::run_estimate(&reference, &sample, &cfg, &out)?;
            println!("{:<6} {:<5} {:<5} {:>14} {:>14} {:>14} {:>14}", "method", "qr", "pm", "estimate", "std.err", "ci_low", "ci_high");
            for (slot, est) in results {
                match est {
                    Some(e) => println!(
                        "{:<6} {:<5} {:<5} {:>14.6} {:>14.6} {:>14.6} {:>14.6}",
                        slot.method,
                        slot.qr_label(),
                        slot.pm_label(),
                        e.point,
                        e.variance.sqrt(),
                        e.ci_low,
                        e.ci_high
                    ),
                    None => println!("{:<6} {:<5} {:<5} {:>14}", slot.method, slot.qr_label(), slot.pm_label(), "failed"),
                }
            }
        }
        Command::Synthesize { reference, n, reps, out, seed, ignore_design } => {
            let written = harness::run_synthesize(&reference, n, reps[0], reps[1], seed, ignore_design, &out)?;
            println!("wrote {} synthetic population(s) to {}", written.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
