//! Command-line front end: orchestrates the analysis pipeline and writes
//! machine-readable reports. Exit codes are part of the interface: 0 success,
//! 2 bad input (files, flags, corrupted reports), 3 numerical or hypothesis
//! failure, 4 prediction contradicted by the shooting oracle.

mod pipeline;
mod sweep;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use averon_core::AvError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "averon",
    version,
    about = "Existence and stability of periodic orbits via averaged perturbation series"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Locate zeros of the leading averaged field, expand the branch of
    /// periodic states, and classify its stability
    Analyze(AnalyzeArgs),
    /// Re-derive verdicts by direct shooting at concrete perturbation
    /// strengths and compare against the series prediction
    Verify(VerifyArgs),
    /// Repeat the analysis across one parameter range and tabulate verdicts
    Sweep(SweepArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct CommonArgs {
    /// System definition file
    file: PathBuf,

    /// Parameter overrides, name=value, comma separated or repeated
    #[arg(long = "param", value_name = "NAME=VALUE[,...]", allow_hyphen_values = true)]
    param: Vec<String>,

    /// Zero guess in manifold coordinates; omit to scan the declared
    /// manifold box
    #[arg(long = "zero-guess", value_name = "V1,V2,...", allow_hyphen_values = true)]
    zero_guess: Option<String>,

    /// Perturbation series truncation order; the default adapts to whatever
    /// the requested branch orders need
    #[arg(long, value_name = "K")]
    order: Option<usize>,

    /// Branch continuation order for critical eigenvalues (in the reduced
    /// case this sets both sides)
    #[arg(long, value_name = "N")]
    mu: Option<usize>,

    /// Continuation order for critical multiplier branches (reduced case)
    #[arg(long, value_name = "N")]
    mu1: Option<usize>,

    /// Continuation order for critical exponent branches (reduced case)
    #[arg(long, value_name = "N")]
    mu2: Option<usize>,

    /// Output directory for report files
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Report format; csv adds plot-data files next to the JSON report
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Perturbation strengths for the oracle: a comma list, or one value
    /// expanded to three dyadic points below it
    #[arg(long, value_name = "E1[,E2,...]", allow_hyphen_values = true)]
    eps: String,

    /// Take predictions from a previously written report instead of
    /// recomputing them; the embedded checksum is enforced
    #[arg(long, value_name = "REPORT.JSON")]
    against: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Parameter to sweep
    #[arg(long = "sweep", value_name = "NAME")]
    name: String,

    /// Inclusive linear grid LO:HI:COUNT
    #[arg(long, value_name = "LO:HI:COUNT", allow_hyphen_values = true)]
    range: String,
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("AVERON_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Analyze(a) => pipeline::cmd_analyze(a),
        Cmd::Verify(a) => verify::cmd_verify(a),
        Cmd::Sweep(a) => sweep::cmd_sweep(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("averon: {e}");
            ExitCode::from(match e {
                AvError::Parse(_) => 2,
                AvError::Numerics(_) | AvError::Hypothesis(_) => 3,
                AvError::Oracle(_) => 4,
            })
        }
    }
}
