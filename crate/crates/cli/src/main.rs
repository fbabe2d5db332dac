mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rankfit_core::decomposition::DecompKind;

#[derive(Parser, Debug)]
#[command(name = "rankfit", version, about = "Data-free rank search and CP/TT compression of conv kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coarse-to-fine rank search; writes a JSON report.
    Search(SearchArgs),
    /// Fits every layer at its selected rank and writes the factors.
    Decompose(DecomposeArgs),
    /// Parameter and FLOP table for a compressed model.
    Report(ReportArgs),
    /// Runs the search over a gamma x beta grid.
    Sweep(SweepArgs),
    /// Checks factored forwards against dense convolutions.
    Verify(VerifyArgs),
}

/// `CxHxW`.
fn parse_input_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse::<usize>()).collect();
    match dims {
        Ok(d) if d.len() == 3 && d.iter().all(|&v| v > 0) => Ok([d[0], d[1], d[2]]),
        _ => Err(format!("expected CxHxW with positive integers, got {s:?}")),
    }
}

#[derive(Args, Debug, Clone)]
struct Geometry {
    /// Input size `CxHxW` for FLOP counts.
    #[arg(long, value_parser = parse_input_size)]
    input_size: Option<[usize; 3]>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    padding: usize,
}

#[derive(Args, Debug, Clone)]
struct SearchOptions {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "cp")]
    decomp: DecompKind,
    /// Lower bounds, one value or one per layer.
    #[arg(long, value_delimiter = ',', required = true)]
    lb: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    ub: Vec<usize>,
    #[arg(long)]
    step: usize,
    /// Iterations per phase.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    lr_w: f64,
    #[arg(long, default_value_t = 0.1)]
    lr_alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    /// Constant learning rates instead of cosine annealing.
    #[arg(long)]
    no_cosine: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for layer-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[command(flatten)]
    geometry: Geometry,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    opts: SearchOptions,
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long)]
    no_cosine: bool,
    /// Defaults to the seed recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    compressed: PathBuf,
    #[arg(long, value_parser = parse_input_size)]
    input_size: [usize; 3],
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    padding: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    opts: SearchOptions,
    #[arg(long, value_delimiter = ',', required = true)]
    gamma_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    beta_grid: Vec<f64>,
    /// Directory for per-cell reports and `sweep.csv`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    compressed: PathBuf,
    /// Spatial size of the random inputs; each layer uses its own channel count.
    #[arg(long, value_parser = parse_input_size)]
    input_size: [usize; 3],
    #[arg(long, default_value_t = 4)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    padding: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feed all-zero inputs instead of random ones.
    #[arg(long)]
    zero_input: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Search(a) => commands::search(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Report(a) => commands::report(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
