use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparse_ba::io::{load_bal, load_g2o, synth_ba, synth_pgo, BalProblem, PoseGraphData};
use sparse_ba::linsolve::SolverKind;
use sparse_ba::optim::{optimize, LmConfig, LmReport, Termination};
use sparse_ba::trace::{ParamSet, ResidualModel};
use sparse_ba::Error;

const CSV_HEADER: &str = "iter,cost,mse,lambda,accepted,cum_time_s";

#[derive(Parser, Debug)]
#[command(name = "sparse-ba", version, about = "Sparse Levenberg-Marquardt benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bundle adjustment on a BAL file or a synthetic ring scene.
    Ba(RunArgs),
    /// Pose-graph optimization on a g2o file or a synthetic helix.
    Pgo(RunArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Solver {
    Cholesky,
    Pcg,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset file (BAL text for `ba`, g2o for `pgo`).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// `CxP` cameras by points for `ba`, pose count for `pgo`.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, value_enum, default_value_t = Solver::Cholesky)]
    solver: Solver,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    /// Initial damping.
    #[arg(long, default_value_t = 1e-6)]
    damping: f64,
    #[arg(long, default_value_t = 1e-8)]
    pcg_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic pixel noise standard deviation (ba only).
    #[arg(long, default_value_t = 1.0)]
    pixel_noise: f64,
    /// Synthetic pose noise standard deviation: initial perturbation for
    /// ba, translation measurement noise for pgo.
    #[arg(long, default_value_t = 0.05)]
    pose_noise: f64,
    /// Per-iteration convergence log.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads for the inner kernels (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Write 0 in the `cum_time_s` column so runs can be diffed.
    #[arg(long)]
    no_wall_clock: bool,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Solver(m) => m,
        }
    }
}

fn data(e: Error) -> Failure {
    Failure::Data(e.to_string())
}

fn from_optimize(e: Error) -> Failure {
    match e {
        Error::NotSpd { .. } | Error::NumericalBreakdown { .. } => Failure::Solver(e.to_string()),
        Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
        other => Failure::Data(other.to_string()),
    }
}

struct Problem {
    name: String,
    model: Box<dyn ResidualModel>,
    params: ParamSet,
    /// Final-error column label and scale applied to the cost.
    error_label: &'static str,
    error_of: fn(&LmReport) -> f64,
}

fn parse_dims(spec: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("--synthetic expects CxP, got {spec:?}"));
    let (c, p) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let c: usize = c.parse().map_err(|_| bad())?;
    let p: usize = p.parse().map_err(|_| bad())?;
    if c == 0 || p == 0 {
        return Err(bad());
    }
    Ok((c, p))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn ba_problem(args: &RunArgs) -> Result<Problem, Failure> {
    let (name, problem): (String, BalProblem) = match (&args.input, &args.synthetic) {
        (Some(path), _) => (dataset_name(path), load_bal(path).map_err(data)?),
        (None, Some(spec)) => {
            let (c, p) = parse_dims(spec)?;
            let s = synth_ba(c, p, args.pixel_noise, args.pose_noise, args.seed)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            (format!("synthetic-{c}x{p}"), s.problem)
        }
        (None, None) => return Err(Failure::Usage("one of --input or --synthetic is required".into())),
    };
    Ok(Problem {
        name,
        model: Box::new(problem.model().map_err(data)?),
        params: problem.params().map_err(data)?,
        error_label: "final_mse",
        error_of: LmReport::mse,
    })
}

fn pgo_problem(args: &RunArgs) -> Result<Problem, Failure> {
    let (name, graph): (String, PoseGraphData) = match (&args.input, &args.synthetic) {
        (Some(path), _) => (dataset_name(path), load_g2o(path).map_err(data)?),
        (None, Some(spec)) => {
            let n: usize = spec
                .parse()
                .map_err(|_| Failure::Usage(format!("--synthetic expects a pose count, got {spec:?}")))?;
            let s = synth_pgo(n, args.pose_noise, 0.2 * args.pose_noise, args.seed)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            (format!("synthetic-{n}"), s.graph)
        }
        (None, None) => return Err(Failure::Usage("one of --input or --synthetic is required".into())),
    };
    if graph.vertices.is_empty() {
        return Err(Failure::Data("pose graph has no vertices".into()));
    }
    Ok(Problem {
        name,
        model: Box::new(graph.model().map_err(data)?),
        params: graph.params().map_err(data)?,
        error_label: "final_error",
        error_of: |r| 0.5 * r.final_cost,
    })
}

fn write_csv(path: &Path, report: &LmReport, wall_clock: bool) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    let rows = report.residual_rows.max(1) as f64;
    for r in &report.trajectory {
        let t = if wall_clock { r.elapsed } else { 0.0 };
        writeln!(
            out,
            "{},{:e},{:e},{:e},{},{:.6}",
            r.iteration,
            r.cost,
            r.cost / rows,
            r.lambda,
            u8::from(r.accepted),
            t
        )?;
    }
    out.flush()
}

fn run(command: Command) -> Result<(), Failure> {
    let (args, problem) = match &command {
        Command::Ba(a) => (a, ba_problem(a)?),
        Command::Pgo(a) => (a, pgo_problem(a)?),
    };
    if args.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let config = LmConfig {
        initial_damping: args.damping,
        max_iterations: args.max_iters,
        solver: match args.solver {
            Solver::Cholesky => SolverKind::Cholesky,
            Solver::Pcg => SolverKind::Pcg,
        },
        pcg_tol: args.pcg_tol,
        ..LmConfig::default()
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let start = Instant::now();
    let report = optimize(problem.model.as_ref(), problem.params, &config).map_err(from_optimize)?;
    let wall = start.elapsed().as_secs_f64();

    if let Some(path) = &args.csv {
        write_csv(path, &report, !args.no_wall_clock)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    }
    let solver = match args.solver {
        Solver::Cholesky => "cholesky",
        Solver::Pcg => "pcg",
    };
    println!(
        "{:<24} {:<9} {:>10} {:>14} {:>12} {:>12}",
        "dataset", "solver", "iterations", problem.error_label, "wall_time_s", "termination"
    );
    println!(
        "{:<24} {:<9} {:>10} {:>14.6e} {:>12.3} {:>12}",
        problem.name,
        solver,
        report.iterations,
        (problem.error_of)(&report),
        wall,
        report.termination
    );
    if report.termination == Termination::SolverFailure {
        return Err(Failure::Solver("linear solver failed at maximum damping".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
