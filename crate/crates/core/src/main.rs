use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use betamix::experiment::{
    emit_plotdata, run_suite, write_outputs, ExperimentConfig, Overrides, PlotKind, Suite,
    DEFAULT_OUT_DIR, OUT_DIR_ENV,
};
use betamix::regression::Kernel;
use betamix::Error;

/// Exact mixing checks, concentration experiments and functional kernel
/// regression forecasts.
///
/// Exit status: 0 when every check passes, 1 when a check fails or a run
/// aborts, 2 on usage or config errors.
#[derive(Parser)]
#[command(name = "betamix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact Davydov / Ibragimov checks on random finite models.
    Mixing(RunArgs),
    /// Tail-probability and Laplace-transform experiments against the bounds.
    Concentration(RunArgs),
    /// Dynamic forecast error of the kernel regression estimator.
    Fkr(RunArgs),
    /// Every exact inequality and closed-form check (no Monte Carlo).
    VerifyAll(RunArgs),
    /// Convert a concentration or fkr report into long-format plot data.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config, or a manifest.json from a previous run.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory (default: $BETAMIX_OUT_DIR/<suite>, else betamix-out/<suite>).
    #[arg(long, short)]
    output: Option<String>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    /// Comma-separated deviation levels.
    #[arg(long, value_delimiter = ',')]
    epsilon_grid: Option<Vec<f64>>,
    /// Bandwidth exponent.
    #[arg(long)]
    theta: Option<f64>,
    /// uniform, downslope-linear or quadratic-decreasing.
    #[arg(long)]
    kernel: Option<String>,
    /// Print the resolved config as TOML and exit without running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Report kind: concentration or fkr.
    #[arg(long)]
    kind: String,
    /// Wide report CSV.
    input: PathBuf,
    /// Destination (stdout when omitted).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

enum Failure {
    Usage(Error),
    Runtime(Error),
    Checks(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => Failure::Usage(e),
            other => Failure::Runtime(other),
        }
    }
}

fn run(suite: Suite, args: RunArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let kernel = args.kernel.as_deref().map(Kernel::from_name).transpose()?;
    config.apply(&Overrides {
        seed: args.seed,
        reps: args.reps,
        output_path: args.output,
        n_grid: args.n_grid,
        epsilon_grid: args.epsilon_grid,
        theta: args.theta,
        kernel,
    });
    let base = std::env::var(OUT_DIR_ENV).unwrap_or_else(|_| DEFAULT_OUT_DIR.to_string());
    let default_output = PathBuf::from(base).join(suite.name());
    let resolved = config.resolve(suite, &default_output.to_string_lossy())?;
    if args.print_config {
        print!("{}", resolved.to_toml()?);
        return Ok(());
    }
    let report = run_suite(&resolved)?;
    let dir = write_outputs(&resolved, &report)?;
    let failed: Vec<String> = report.failed().into_iter().map(str::to_string).collect();
    println!(
        "{}: {} checks, {} failed; reports in {}",
        suite.name(),
        report.checks.len(),
        failed.len(),
        dir.display()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(failed))
    }
}

fn plot(args: PlotArgs) -> Result<(), Failure> {
    let kind = PlotKind::from_name(&args.kind)?;
    let text = std::fs::read_to_string(&args.input).map_err(|e| {
        Failure::Usage(Error::Config(format!(
            "cannot read {}: {e}",
            args.input.display()
        )))
    })?;
    let out = emit_plotdata(&text, kind)?;
    match args.output {
        Some(p) => std::fs::write(p, out).map_err(|e| Failure::Runtime(e.into())),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mixing(a) => run(Suite::Mixing, a),
        Command::Concentration(a) => run(Suite::Concentration, a),
        Command::Fkr(a) => run(Suite::Fkr, a),
        Command::VerifyAll(a) => run(Suite::VerifyAll, a),
        Command::Plotdata(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks(names)) => {
            eprintln!("failed checks: {}", names.join(", "));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
