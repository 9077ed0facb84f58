mod analyze;
mod bench;
mod cost;
mod distill;
mod dump;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deltaconv::Error;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "DELTACONV_OUT";
pub const DEFAULT_OUT: &str = "deltaconv-out";

#[derive(Debug, Parser)]
#[command(name = "deltaconv", version, about = "Attention locality analysis, ΔConv cost model, distillation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// ASM profiles, effective receptive fields and sink detection for a directory of attention maps.
    Analyze(analyze::Args),
    /// FLOPs of every attention site and its ΔConv replacement across resolutions.
    Cost(cost::Args),
    /// Distill ΔConv blocks from a frozen teacher described by a manifest.
    Distill(distill::Args),
    /// Wall-clock timing of one block across latent sizes.
    Bench(bench::Args),
    /// Export teacher or synthetic attention maps for `analyze`.
    DumpTeacher(dump::Args),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dimension { .. } | Error::Config(_) | Error::Usage(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze::run(a),
        Command::Cost(a) => cost::run(a),
        Command::Distill(a) => distill::run(a),
        Command::Bench(a) => bench::run(a),
        Command::DumpTeacher(a) => dump::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
