//! `resnet-lddmm`: command-line front end for diffeomorphic point-cloud
//! registration.

mod commands;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "resnet-lddmm", version, about = "Diffeomorphic point-cloud registration with residual-network flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a flow deforming the source onto the target.
    Register(RegisterArgs),
    /// Target registration error of a deformed cloud against a target.
    Evaluate(EvaluateArgs),
    /// Re-export the geodesic path of a finished run.
    Geodesic(GeodesicArgs),
    /// Regularity diagnostics of a finished run.
    Diagnose(DiagnoseArgs),
    /// Repeat a registration over values of one hyper-parameter.
    Sweep(SweepArgs),
}

/// Training hyper-parameters. Flags override values read from `--config`.
#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of building blocks.
    #[arg(long = "L")]
    num_blocks: Option<usize>,
    /// Hidden width of each block.
    #[arg(long, alias = "m")]
    width: Option<usize>,
    /// ADAM learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Data-term scale.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    data_term: Option<DataTermArg>,
    #[arg(long)]
    sinkhorn_eps: Option<f64>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// Negative slope of the leaky activation.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_normalize: bool,
    /// Skip rigid ICP pre-alignment.
    #[arg(long)]
    no_prealign: bool,
    #[arg(long, value_enum)]
    kinetic_weighting: Option<WeightingArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum DataTermArg {
    Cd,
    Med,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ActivationArg {
    Relu,
    Leaky,
    Tanh,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum WeightingArg {
    Riemann,
    Table1,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum FormatArg {
    Obj,
    Ply,
    Xyz,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
    /// `i j` lines matching source point i to target point j; enables TRE.
    #[arg(long)]
    correspondence: Option<PathBuf>,
    /// Format of the geodesic frames (defaults to the source's).
    #[arg(long, value_enum)]
    frame_format: Option<FormatArg>,
    /// Points per axis of the diagnostics probe and Jacobian grids.
    #[arg(long, default_value_t = 16)]
    grid: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    deformed: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    correspondence: PathBuf,
    /// Append a `label,tre` row to this CSV file.
    #[arg(long)]
    append_csv: Option<PathBuf>,
    #[arg(long, default_value = "")]
    label: String,
}

#[derive(Args, Debug)]
struct GeodesicArgs {
    /// Output directory of an earlier `register` run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    frame_format: Option<FormatArg>,
    /// Subdivide every Euler step this many times.
    #[arg(long, default_value_t = 1)]
    refine: usize,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    correspondence: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    grid: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SweepAxis {
    M,
    Activation,
    Sigma,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    #[arg(long)]
    correspondence: Option<PathBuf>,
    /// Number of runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    train: TrainArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Register(a) => commands::register(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Geodesic(a) => commands::geodesic(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
