use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crossest::data::{stratified_folds, Dataset};
use crossest::error::Error;
use crossest::estimate::{cross_estimate, cv_cross_estimate_auto, difference_in_means, AteEstimate};
use crossest::forest::{ml_cross_estimate, ForestParams};
use crossest::regress::{CenteredFitter, Lasso, Ols, Ridge, Standardized};
use crossest::sim::{run_config, run_figure_sweep, CoverageReport, SimConfig};
use crossest::theory::{ridge_theory, SpectrumSpec};

#[derive(Parser, Debug)]
#[command(name = "crossest", version, about = "Regression-adjusted average treatment effects for randomized experiments")]
struct Cli {
    /// Worker threads for coverage runs (results do not depend on it).
    #[arg(long, global = true, env = "CROSSEST_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the treatment effect from a CSV file with columns w,y,x1,...,xp.
    Estimate(EstimateArgs),
    /// Coverage study for one simulation config, optionally over several sample sizes.
    Simulate(SimArgs),
    /// Coverage study for one simulation config.
    Coverage(SimArgs),
    /// Asymptotic variance of optimally tuned ridge adjustments.
    RidgeTheory(RidgeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Diff,
    Ols,
    Ridge,
    Lasso,
    Cvce,
    Forest,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Input CSV.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "cvce")]
    method: Method,
    #[arg(long = "K", alias = "k", default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Penalty for ridge and lasso.
    #[arg(long)]
    lambda: Option<f64>,
    /// Grid length for cvce.
    #[arg(long, default_value_t = 30)]
    n_lambda: usize,
    /// Smallest grid penalty as a fraction of the largest, for cvce.
    #[arg(long, default_value_t = 1e-3)]
    lambda_ratio: f64,
    /// Trees per arm for the forest.
    #[arg(long, default_value_t = 500)]
    trees: usize,
    /// Fit ols/ridge/lasso on unit-variance columns and map coefficients back.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Simulation config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// CSV report; written only when the whole run succeeds.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sample sizes overriding `n`.
    #[arg(long, value_delimiter = ',')]
    n_grid: Vec<usize>,
}

#[derive(Args, Debug)]
struct RidgeArgs {
    /// p / n.
    #[arg(long)]
    gamma: f64,
    /// Signal variance alpha^2.
    #[arg(long)]
    alpha2: f64,
    #[arg(long)]
    sigma: f64,
    /// Treated share.
    #[arg(long)]
    pi: f64,
    /// JSON file {"atoms": [...], "weights": [...]} describing the covariance spectrum; identity if absent.
    #[arg(long)]
    spectrum: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Numeric(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Serialize)]
struct EstimateOutput {
    method: String,
    tau_hat: f64,
    variance: f64,
    ci_low: f64,
    ci_high: f64,
    alpha: f64,
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    seed: u64,
}

#[derive(Serialize)]
struct RidgeOutput {
    v0: f64,
    v1: f64,
    lambda_star_0: f64,
    lambda_star_1: f64,
    #[serde(rename = "S")]
    s: f64,
    unadjusted_limit: f64,
    /// Difference-in-means limit with a unit coefficient on the signal term.
    unadjusted_limit_paper_coeff: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumFile {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numeric(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult<()> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Failure::Input(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let needs_lambda = matches!(args.method, Method::Ridge | Method::Lasso);
    if needs_lambda && args.lambda.is_none_or(|l| !(l > 0.0 && l.is_finite())) {
        return Err(Failure::Input("--lambda > 0 is required for ridge and lasso".into()));
    }
    let linear = matches!(args.method, Method::Ols | Method::Ridge | Method::Lasso);
    if args.standardize && !linear {
        return Err(Failure::Input("--standardize applies to ols, ridge and lasso only".into()));
    }
    let d = Dataset::from_csv_path(&args.input)?;

    let cross = |fitter: &dyn CenteredFitter| -> CliResult<AteEstimate> {
        let plan = stratified_folds(d.treatments(), args.k, args.seed)?;
        Ok(cross_estimate(&d, &plan, fitter, args.alpha)?)
    };
    let linear_fit = |fitter: Box<dyn CenteredFitter>| -> CliResult<AteEstimate> {
        if args.standardize {
            cross(&Standardized(fitter))
        } else {
            cross(fitter.as_ref())
        }
    };
    let (est, k) = match args.method {
        Method::Diff => (difference_in_means(&d, args.alpha)?, None),
        Method::Ols => (linear_fit(Box::new(Ols))?, Some(args.k)),
        Method::Ridge => (linear_fit(Box::new(Ridge { lambda: args.lambda.unwrap_or_default() }))?, Some(args.k)),
        Method::Lasso => (linear_fit(Box::new(Lasso { lambda: args.lambda.unwrap_or_default() }))?, Some(args.k)),
        Method::Cvce => {
            let plan = stratified_folds(d.treatments(), args.k, args.seed)?;
            let cv = cv_cross_estimate_auto(&d, &plan, args.n_lambda, args.lambda_ratio, args.alpha)?;
            (cv.estimate, Some(args.k))
        }
        Method::Forest => {
            let params = ForestParams { num_trees: args.trees, ..ForestParams::default() };
            (ml_cross_estimate(&d, &params, args.alpha, args.seed)?.to_ate(), None)
        }
    };
    print_json(&EstimateOutput {
        method: est.method,
        tau_hat: est.tau_hat,
        variance: est.variance,
        ci_low: est.ci_low,
        ci_high: est.ci_high,
        alpha: est.alpha,
        k,
        lambda: est.lambda,
        seed: args.seed,
    })
}

fn load_config(path: &Path) -> CliResult<SimConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let config: SimConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Write through a temporary file in the target directory, so a failed run
/// never leaves a partial report behind.
fn write_report(report: &CoverageReport, out: &Path) -> CliResult<()> {
    let dir = match out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| Failure::Input(format!("{}: {e}", out.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    report.write_csv(&mut tmp)?;
    tmp.flush().map_err(io)?;
    tmp.persist(out).map_err(|e| io(e.error))?;
    Ok(())
}

fn summarize(report: &CoverageReport) {
    for r in &report.rows {
        eprintln!(
            "{} n={} p={}: coverage95 {:.3}, coverage99 {:.3}, mean V_hat {:.4e}, Var(tau_hat) {:.4e} over {} reps",
            r.method, r.n, r.p, r.coverage95, r.coverage99, r.mean_vhat, r.var_tauhat, r.reps
        );
    }
}

fn cmd_simulate(args: &SimArgs, sweep: bool) -> CliResult<()> {
    let config = load_config(&args.config)?;
    let report = if sweep && !args.n_grid.is_empty() {
        run_figure_sweep(&config, &args.n_grid)?
    } else if !args.n_grid.is_empty() {
        return Err(Failure::Input("--n-grid is only accepted by `simulate`".into()));
    } else {
        run_config(&config)?
    };
    write_report(&report, &args.out)?;
    summarize(&report);
    Ok(())
}

fn cmd_ridge_theory(args: &RidgeArgs) -> CliResult<()> {
    let spec = match &args.spectrum {
        None => SpectrumSpec::identity(args.gamma, args.pi, args.alpha2, args.sigma)?,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            let file: SpectrumFile =
                serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            SpectrumSpec::new(args.gamma, file.atoms, file.weights, args.pi, args.alpha2, args.sigma)?
        }
    };
    let t = ridge_theory(&spec)?;
    print_json(&RidgeOutput {
        v0: t.v0,
        v1: t.v1,
        lambda_star_0: t.lambda_star_0,
        lambda_star_1: t.lambda_star_1,
        s: t.s,
        unadjusted_limit: t.unadjusted_limit,
        unadjusted_limit_paper_coeff: t.unadjusted_limit_unit_coefficient,
    })
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Failure::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Input(e.to_string()))?;
    }
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a, true),
        Command::Coverage(a) => cmd_simulate(a, false),
        Command::RidgeTheory(a) => cmd_ridge_theory(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
