//! `deepbsde solve ...`: run one scheme on one benchmark problem over several
//! seeds and write a JSON or CSV report.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepbsde::bench::{emit_report, run_experiment, write_report, ExperimentSpec, ReportFormat};
use deepbsde::schemes::{DsTerminal, NetworkShape, SchemeKind};
use deepbsde::{Activation, TrainConfig};

#[derive(Parser)]
#[command(name = "deepbsde", version, about = "Neural backward-SDE solvers for semilinear PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scheme on a benchmark problem and report the estimate of u(0, x0).
    Solve(SolveArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// mdbdp, dbdp1, dbdp2, ds or dbsde.
    #[arg(long)]
    scheme: SchemeKind,
    /// bounded, unbounded or heat.
    #[arg(long)]
    problem: String,
    #[arg(long)]
    dim: usize,
    /// Number of time steps N.
    #[arg(long, default_value_t = 120)]
    steps: usize,
    /// SGD iterations per time step.
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    /// Iterations for the first trained step.
    #[arg(long, default_value_t = 20000)]
    final_iters: usize,
    #[arg(long, default_value_t = 1000)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Base seed; run r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    lr_init: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_final: f64,
    /// Comma-separated hidden widths (default: d+10,d+10).
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// json or csv.
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Save every run's networks under <dir>/run_<r>.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Deep Splitting only: use g and its gradient instead of fitting U_N.
    #[arg(long)]
    exact_terminal: bool,
}

fn run(args: SolveArgs) -> Result<bool, deepbsde::Error> {
    if args.exact_terminal && args.scheme != SchemeKind::Ds {
        return Err(deepbsde::Error::InvalidArgument(
            "--exact-terminal only applies to --scheme ds".into(),
        ));
    }
    let train = TrainConfig {
        iterations_per_step: args.iters,
        final_step_iterations: args.final_iters,
        batch_size: args.batch,
        lr_initial: args.lr_init,
        lr_final: args.lr_final,
        seed: args.seed,
    };
    train.validate()?;
    let mut spec = ExperimentSpec::new(args.scheme, &args.problem, args.dim, args.steps, train, args.runs);
    if let Some(hidden) = args.hidden {
        spec.shape = NetworkShape {
            hidden,
            activation: Activation::Tanh,
        };
    }
    spec.ds_terminal = if args.exact_terminal {
        DsTerminal::Exact
    } else {
        DsTerminal::Fit
    };
    spec.checkpoint_dir = args.checkpoint_dir;
    let report = run_experiment(&spec)?;
    match &args.out {
        Some(path) => emit_report(&report, path, args.format)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_report(&report, args.format, &mut lock)?;
            lock.flush()?;
        }
    }
    if report.mean.is_none() {
        log::error!("no run converged (NC)");
        return Ok(false);
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve(args) => run(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
