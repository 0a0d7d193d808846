//! `gtr` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric abort.

mod commands;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fail::Fail;

#[derive(Parser)]
#[command(name = "gtr", version, about = "Global temporal retriever forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared run flags.
#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Comma-separated seeds; results are averaged across them.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory for manifest, metrics and checkpoints.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation and test splits.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train a grid of configuration variants and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `LABEL: key=value key=value ...`; repeatable, at least one.
        #[arg(long = "cell", value_name = "CELL")]
        cells: Vec<String>,
        /// Label of the reference cell; defaults to the first.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Estimate the global cycle length from the ACF of one channel.
    EstimateCycle {
        #[arg(long)]
        data: PathBuf,
        /// Channel name or 0-based index.
        #[arg(long, default_value = "0")]
        channel: String,
        #[arg(long)]
        max_lag: usize,
        #[arg(long, default_value_t = 2)]
        min_lag: usize,
        /// Also write the ACF as CSV here.
        #[arg(long)]
        acf_out: Option<PathBuf>,
    },
    /// Pearson correlation matrix of segments of one channel, or of channels.
    Correlate {
        #[arg(long)]
        data: PathBuf,
        /// Split one channel into segments of this length; omitted means
        /// channel-by-channel correlation.
        #[arg(long)]
        segment_len: Option<usize>,
        #[arg(long, default_value = "0")]
        channel: String,
        /// CSV output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo check of the fused-estimator correlation bound.
    VerifyTheorem {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run one cell instead of the default grid.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        sigma_y2: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_eta2: f64,
        #[arg(long, default_value_t = 0.25)]
        sigma_eps2: f64,
        /// JSON-lines output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        /// global-cycle, sine or noise.
        #[arg(long, default_value = "global-cycle")]
        kind: String,
        #[arg(long, default_value_t = 20_000)]
        length: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 168)]
        cycle_len: usize,
        #[arg(long, default_value_t = 24)]
        period: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        pattern_amp: f64,
        #[arg(long, default_value_t = 4.0)]
        sine_amp: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Fail> {
    match cli.command {
        Command::Train(run) => commands::train(&run),
        Command::Eval { run, checkpoint } => commands::eval(&run, &checkpoint),
        Command::Ablate { run, cells, baseline } => commands::ablate(&run, &cells, baseline.as_deref()),
        Command::EstimateCycle {
            data,
            channel,
            max_lag,
            min_lag,
            acf_out,
        } => commands::estimate_cycle(&data, &channel, max_lag, min_lag, acf_out.as_deref()),
        Command::Correlate {
            data,
            segment_len,
            channel,
            out,
        } => commands::correlate(&data, segment_len, &channel, out.as_deref()),
        Command::VerifyTheorem {
            samples,
            seed,
            rho,
            sigma_y2,
            sigma_eta2,
            sigma_eps2,
            out,
        } => {
            let cell = rho.map(|rho| gtr_core::analysis::TheoremParams {
                sigma_y2,
                sigma_eta2,
                sigma_eps2,
                rho,
                samples,
                seed,
            });
            commands::verify_theorem(samples, seed, cell, out.as_deref())
        }
        Command::Synth {
            kind,
            length,
            channels,
            cycle_len,
            period,
            noise,
            pattern_amp,
            sine_amp,
            seed,
            out,
        } => {
            let kind = kind.parse().map_err(Fail::usage)?;
            let params = gtr_core::synth::SynthParams {
                kind,
                length,
                channels,
                cycle_len,
                period,
                noise,
                pattern_amp,
                sine_amp,
                seed,
            };
            commands::synth(&params, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
