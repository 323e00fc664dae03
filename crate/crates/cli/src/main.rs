// Negated comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{BridgeServeArgs, EvalArgs, FieldDemoArgs, PhantomArgs, ReconArgs, SimulateArgs, SweepArgs};
use crate::config::ConfigError;

/// Sparse-view CT reconstruction with Poisson-flow sampling and data consistency.
#[derive(Debug, Parser)]
#[command(name = "respf", version)]
struct Cli {
    /// JSON run config. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize a phantom to an array file.
    Phantom(PhantomArgs),
    /// Simulate sparse-view cases and add them to a dataset manifest.
    Simulate(SimulateArgs),
    /// Reconstruct cases from a dataset manifest.
    Recon(ReconArgs),
    /// Image quality of a reconstruction against a reference.
    Eval(EvalArgs),
    /// PSNR and SSIM over a grid of fusion coefficients.
    SweepAlpha(SweepArgs),
    /// Sample trajectories in a 2D point-charge field.
    FieldDemo(FieldDemoArgs),
    /// Serve a denoiser over the bridge protocol.
    BridgeServe(BridgeServeArgs),
    /// Print the default run config as JSON.
    Defaults,
}

/// 2 config error, 3 I/O error, 4 numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use respf_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e.root() {
                E::Param(_) | E::ShapeMismatch(_) | E::Validation(_) | E::VersionMismatch { .. } => 2,
                E::Numerical(_) => 4,
                _ => 3,
            };
        }
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<image::ImageError>() || cause.is::<csv::Error>() {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config::config_err("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom(a) => commands::phantom(a, cfg),
        Command::Simulate(a) => commands::simulate(a, cfg),
        Command::Recon(a) => commands::recon(a, cfg),
        Command::Eval(a) => commands::eval(a),
        Command::SweepAlpha(a) => commands::sweep_alpha(a, cfg),
        Command::FieldDemo(a) => commands::field_demo(a, cfg),
        Command::BridgeServe(a) => commands::bridge_serve(a, cfg),
        Command::Defaults => {
            println!("{}", serde_json::to_string_pretty(&config::RunConfig::default())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
