//! Command-line interface.
//!
//! Exit codes: 0 success, 1 failed `check`, 2 usage or validation error,
//! 3 the solver stopped without a certificate.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::barrier::Polytope;
use crate::data::{self, DataError, Geometry, InputMode, LoadOptions, Norm, Sample};
use crate::experiments::{self, TrialReport};
use crate::objective;
use crate::oracle;
use crate::predictor::{self, ModelError, Queries};
use crate::solver::{self, SolveOptions, SolverError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BREACH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CERTIFIED: i32 = 3;

/// Environment variable that overrides the default seed of `check` and `lb-sim`.
pub const SEED_ENV: &str = "LIPREG_SEED";

#[derive(Debug, Parser)]
#[command(name = "lipreg", version, about = "Truncated Lipschitz regression under log loss")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to a labeled sample.
    Fit(FitArgs),
    /// Predict probabilities at new points.
    Predict(PredictArgs),
    /// Holdout log loss and generalization bound of a model.
    Eval(EvalArgs),
    /// Compare the interior-point solver with the reference oracle.
    Check(CheckArgs),
    /// Lower-bound and anti-concentration simulations.
    #[command(subcommand)]
    LbSim(LbSim),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Coords,
    Matrix,
}

impl From<ModeArg> for InputMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Coords => InputMode::Coordinates,
            ModeArg::Matrix => InputMode::Matrix,
        }
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("truncation").required(true).args(["theta", "auto_theta"]))]
struct FitArgs {
    /// Labeled CSV sample.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "coords")]
    mode: ModeArg,
    /// p-norm for coordinate input: a number p >= 1, or `inf`.
    #[arg(long, default_value = "2")]
    norm: Norm,
    /// Use distances as given instead of scaling to unit diameter.
    #[arg(long)]
    no_normalize: bool,
    /// Lipschitz constant L, in normalized distance units.
    #[arg(long)]
    lipschitz: f64,
    /// Truncation level in (0, 1/2).
    #[arg(long)]
    theta: Option<f64>,
    /// Use theta = n^(-1/(d+2)) with d from --ddim.
    #[arg(long)]
    auto_theta: bool,
    /// Doubling dimension (defaults to the ambient dimension in coordinate mode).
    #[arg(long)]
    ddim: Option<f64>,
    /// Target suboptimality in nats of total (summed) empirical risk.
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long)]
    output: PathBuf,
    /// Write the iteration trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV of query points (`x1..xk`) or distance rows (`d1..dn`).
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled holdout CSV in the model's input representation.
    #[arg(long)]
    test: PathBuf,
    /// Doubling dimension for the bound (defaults to the one stored in the model).
    #[arg(long)]
    ddim: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Objective tolerance of the reference oracle.
    #[arg(long, default_value_t = 1e-6)]
    oracle_tol: f64,
    /// Largest random instance size.
    #[arg(long, default_value_t = 8)]
    max_n: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct SimCommon {
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, env = SEED_ENV, default_value_t = 1)]
    seed: u64,
    /// Write the report here; stdout gets a readable summary either way.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum LbSim {
    /// All-zeros event of the single-point construction.
    Realizable {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        eps: f64,
        #[command(flatten)]
        common: SimCommon,
    },
    /// ERM choosing the worse of two hypotheses.
    Agnostic {
        #[arg(long)]
        n: u64,
        #[arg(long = "C", alias = "c")]
        c: f64,
        #[command(flatten)]
        common: SimCommon,
    },
    /// Gap between two symbol counts of a uniform six-symbol sample.
    BinomGap {
        #[arg(long)]
        n: u64,
        #[command(flatten)]
        common: SimCommon,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    NotCertified(String),
    Breach(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::NotCertified(_) => EXIT_NOT_CERTIFIED,
            Failure::Breach(_) => EXIT_BREACH,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::NotCertified(m) | Failure::Breach(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{context}: {err}"))
}

fn solver_failure(err: SolverError) -> Failure {
    match err {
        SolverError::Conditioning { .. } | SolverError::Infeasible { .. } => {
            Failure::NotCertified(format!("solver stopped: {err}"))
        }
        other => Failure::Usage(other.to_string()),
    }
}

fn model_failure(context: &str, err: ModelError) -> Failure {
    match err {
        ModelError::Solver(e) => solver_failure(e),
        other => usage(context, other),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
        Command::LbSim(a) => cmd_lb_sim(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn open(flag: &str, path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| usage(format!("{flag} {}", path.display()), e))
}

fn create(flag: &str, path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| usage(format!("{flag} {}", path.display()), e))
}

fn io_failure(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Breach(format!("writing {}: {e}", path.display()))
}

#[derive(Serialize)]
struct TraceHeader<'a> {
    format: &'a str,
    version: u32,
    lipschitz: f64,
    theta: f64,
    epsilon: f64,
    points: usize,
}

fn cmd_fit(a: FitArgs) -> Outcome {
    let options = LoadOptions { mode: a.mode.into(), norm: a.norm, normalize: !a.no_normalize };
    let sample = data::load_sample(open("--input", &a.input)?, options).map_err(|e| usage("--input", e))?;

    let ambient = match sample.geometry() {
        Geometry::Coordinates { points, .. } => points.first().map(|p| p.len() as f64),
        Geometry::Matrix => None,
    };
    let ddim = a.ddim.or(ambient.filter(|&d| d >= 1.0));
    if let Some(d) = a.ddim {
        if !(d >= 1.0 && d.is_finite()) {
            return Err(usage("--ddim", DataError::BadDdim(d)));
        }
    }
    let theta = match (a.theta, a.auto_theta) {
        (Some(t), _) => t,
        (None, _) => {
            let d = ddim.ok_or_else(|| Failure::Usage("--auto-theta needs --ddim in matrix mode".into()))?;
            data::default_theta(sample.total_count(), d).map_err(|e| usage("--auto-theta", e))?
        }
    };
    if !(theta > 0.0 && theta < 0.5) {
        return Err(usage("--theta", DataError::BadTheta(theta)));
    }
    if !(a.lipschitz > 0.0 && a.lipschitz.is_finite()) {
        return Err(Failure::Usage(format!("--lipschitz must be positive and finite, got {}", a.lipschitz)));
    }
    if !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
        return Err(Failure::Usage(format!("--epsilon must be positive and finite, got {}", a.epsilon)));
    }

    let violations = sample.check_triangle_inequality();
    if let Some(&(i, j, k)) = violations.first() {
        eprintln!(
            "warning: distances violate the triangle inequality in {} triples, e.g. ({i}, {j}, {k})",
            violations.len()
        );
    }

    let opts = SolveOptions { epsilon: a.epsilon, max_iter: a.max_iter, record_trace: a.trace.is_some(), ..SolveOptions::default() };
    let (model, fit) = predictor::fit_model(&sample, a.lipschitz, theta, ddim, &opts)
        .map_err(|e| model_failure("fit", e))?;

    let mut out = create("--output", &a.output)?;
    predictor::save_model(&model, &mut out).map_err(|e| usage("--output", e))?;
    out.flush().map_err(io_failure(&a.output))?;

    if let (Some(path), Some(trace)) = (&a.trace, &fit.trace) {
        let mut sink = create("--trace", path)?;
        let header = TraceHeader {
            format: "lipreg-trace",
            version: 1,
            lipschitz: a.lipschitz,
            theta,
            epsilon: a.epsilon,
            points: sample.len(),
        };
        serde_json::to_writer(&mut sink, &header).map_err(|e| usage("--trace", e))?;
        writeln!(sink).map_err(io_failure(path))?;
        solver::write_trace(trace, &mut sink).map_err(io_failure(path))?;
        sink.flush().map_err(io_failure(path))?;
    }

    println!("observations: {} ({} distinct points)", sample.total_count(), sample.len());
    match (a.theta, ddim) {
        (Some(_), _) => println!("theta: {theta}"),
        (None, Some(d)) => println!("theta: {theta:.6} (auto, d = {d})"),
        (None, None) => unreachable!("auto theta requires a dimension"),
    }
    println!("lipschitz: {}", a.lipschitz);
    println!("iterations: {}", fit.iterations);
    let risk = objective::risk_value(&fit.w_star, &sample).map_err(|e| usage("fit", e))?;
    println!("empirical risk: {risk:.10} nats (sum over observations)");
    println!("certified gap: {:.3e} nats", fit.epsilon_cert);
    println!("model: {}", a.output.display());
    if fit.certified {
        Ok(())
    } else {
        Err(Failure::NotCertified(format!(
            "stopped after {} iterations without reaching epsilon = {} (gap bound {:.3e})",
            fit.iterations, a.epsilon, fit.epsilon_cert
        )))
    }
}

fn load_model(path: &Path) -> Result<predictor::Model, Failure> {
    predictor::load_model(open("--model", path)?).map_err(|e| usage(format!("--model {}", path.display()), e))
}

/// Input representation implied by a query header: `x1..xk` or `d1..dn`.
fn header_mode(columns: &[String]) -> Option<InputMode> {
    let all = |prefix: char| {
        !columns.is_empty()
            && columns.iter().all(|c| {
                let mut chars = c.chars();
                chars.next().is_some_and(|h| h.eq_ignore_ascii_case(&prefix))
                    && chars.as_str().parse::<usize>().is_ok()
            })
    };
    if all('x') {
        Some(InputMode::Coordinates)
    } else if all('d') {
        Some(InputMode::Matrix)
    } else {
        None
    }
}

fn read_queries(flag: &str, path: &Path, model: &predictor::Model) -> Result<(Queries, Option<Vec<u8>>), Failure> {
    let table = data::read_table(open(flag, path)?).map_err(|e| usage(flag, e))?;
    let mode = header_mode(&table.columns).unwrap_or(model.mode());
    if mode != model.mode() {
        return Err(Failure::Usage(format!(
            "{flag}: queries are in {mode} form but the model was fitted in {} mode",
            model.mode()
        )));
    }
    let queries = match mode {
        InputMode::Coordinates => Queries::Points(table.rows),
        InputMode::Matrix => Queries::DistanceRows(table.rows),
    };
    Ok((queries, table.labels))
}

fn cmd_predict(a: PredictArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let (queries, _) = read_queries("--queries", &a.queries, &model)?;
    let preds = predictor::predict_batch(&model, &queries).map_err(|e| usage("--queries", e))?;

    let mut out = create("--output", &a.output)?;
    let write = |out: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(
            out,
            "# lipreg predictions v1 model={} mode={} lipschitz={} theta={}",
            a.model.display(),
            model.mode(),
            model.lipschitz(),
            model.theta()
        )?;
        writeln!(out, "id,probability")?;
        for (i, p) in preds.iter().enumerate() {
            writeln!(out, "{i},{p:?}")?;
        }
        out.flush()
    };
    write(&mut out).map_err(io_failure(&a.output))?;
    println!("predictions: {} written to {}", preds.len(), a.output.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let (queries, labels) = read_queries("--test", &a.test, &model)?;
    let labels = labels.ok_or_else(|| usage("--test", DataError::NoLabelColumn))?;
    let points = labels.len();
    let mean = predictor::holdout_log_loss(&model, &queries, &labels).map_err(|e| usage("--test", e))?;

    let ddim = match a.ddim.or(model.ddim()) {
        Some(d) => d,
        None => {
            eprintln!("note: the model stores no doubling dimension; using d = 1 (pass --ddim to override)");
            1.0
        }
    };
    // The bound is stated for L >= 1; a smaller class is contained in the L = 1 class.
    let lip = model.lipschitz().max(1.0);
    let n = model.sample().total_count() as u64;
    let bound = experiments::generalization_bound(n, lip, ddim, model.theta(), a.delta)
        .map_err(|e| usage("bound", e))?;

    println!("holdout points: {points}");
    println!("mean log loss: {mean:.10} nats");
    println!(
        "generalization bound: {bound:.6e} (n = {n}, L = {lip}, d = {ddim}, theta = {}, delta = {})",
        model.theta(),
        a.delta
    );
    Ok(())
}

/// A random instance for the solver-vs-oracle comparison: a symmetrized
/// random matrix, random labels, `L` in `[0.5, 5]` and `theta` from
/// `{0.05, 0.1, 0.2}`.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Sample, f64, f64) {
    let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
    let mut d = (&raw + raw.transpose()) * 0.5;
    d.fill_diagonal(0.0);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    let sample = Sample::from_matrix(d, &labels, true).expect("random matrix is valid");
    let lipschitz = rng.gen_range(0.5..=5.0);
    let theta = [0.05, 0.1, 0.2][rng.gen_range(0..3)];
    (sample, lipschitz, theta)
}

fn bundled_instances() -> Vec<(Sample, f64, f64)> {
    let pair = |labels: &[u8]| {
        Sample::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), labels, false)
            .expect("fixed pair is valid")
    };
    let line = Sample::from_coordinates(
        (0..5).map(|k| vec![k as f64]).collect(),
        &[0, 0, 1, 0, 1],
        Norm::EUCLIDEAN,
        true,
    )
    .expect("fixed line is valid");
    vec![(pair(&[0, 1]), 0.1, 0.05), (pair(&[1, 1]), 0.8, 0.1), (line, 1.0, 0.1)]
}

fn cmd_check(a: CheckArgs) -> Outcome {
    if !(a.epsilon > 0.0) || !(a.oracle_tol > 0.0) {
        return Err(Failure::Usage("--epsilon and --oracle-tol must be positive".into()));
    }
    if !(2..=oracle::MAX_ORACLE_DIM).contains(&a.max_n) {
        return Err(Failure::Usage(format!("--max-n must lie in 2..={}", oracle::MAX_ORACLE_DIM)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut instances = bundled_instances();
    for _ in 0..a.instances {
        let n = rng.gen_range(2..=a.max_n);
        instances.push(random_instance(&mut rng, n));
    }

    let opts = SolveOptions::with_epsilon(a.epsilon);
    let (mut max_gap, mut max_excess, mut violations, mut breaches) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0, 0);
    for (k, (sample, lip, theta)) in instances.iter().enumerate() {
        let p = Polytope::new(sample, *lip, *theta).map_err(|e| usage("instance", e))?;
        let fit = solver::fit(sample, &p, &opts).map_err(solver_failure)?;
        let reference = oracle::oracle_solve(sample, &p, a.oracle_tol).map_err(|e| usage("oracle", e))?;
        let ipm = objective::risk_value(&fit.w_star, sample).map_err(|e| usage("instance", e))?;
        let best = objective::risk_value(&reference, sample).map_err(|e| usage("oracle", e))?;
        let gap = ipm - best;
        max_gap = max_gap.max(gap);
        max_excess = max_excess.max(gap - fit.epsilon_cert);
        violations += fit.contract_violations;
        let ok = fit.certified && gap <= a.epsilon + a.oracle_tol && gap <= fit.epsilon_cert + 1e-8;
        if !ok {
            breaches += 1;
            eprintln!(
                "instance {k}: n = {}, L = {lip:.4}, theta = {theta}: gap {gap:.3e}, certificate {:.3e}, certified {}",
                sample.len(),
                fit.epsilon_cert,
                fit.certified
            );
        }
    }
    println!("instances: {} ({} bundled, seed {})", instances.len(), instances.len() - a.instances, a.seed);
    println!("max objective gap vs oracle: {max_gap:.3e} nats (allowed {:.3e})", a.epsilon + a.oracle_tol);
    println!("max gap minus certificate: {max_excess:.3e}");
    println!("local-norm contract violations: {violations}");
    if breaches > 0 || violations > 0 {
        return Err(Failure::Breach(format!("{breaches} instances out of tolerance, {violations} contract violations")));
    }
    println!("check passed");
    Ok(())
}

fn cmd_lb_sim(sim: LbSim) -> Outcome {
    let (report, common) = match sim {
        LbSim::Realizable { n, eps, common } => {
            (experiments::realizable_lb_trial(n, eps, common.seed, common.trials), common)
        }
        LbSim::Agnostic { n, c, common } => (experiments::agnostic_lb_trial(n, c, common.seed, common.trials), common),
        LbSim::BinomGap { n, common } => (experiments::binom_gap_trial(n, common.seed, common.trials), common),
    };
    let report = report.map_err(|e| usage("lb-sim", e))?;
    print_report(&report);
    if let Some(path) = &common.output {
        let mut sink = create("--output", path)?;
        match common.format {
            Format::Json => report.write_json(&mut sink),
            Format::Csv => {
                writeln!(sink, "# lipreg lb-sim v1").map_err(io_failure(path))?;
                report.write_csv(&mut sink)
            }
        }
        .map_err(|e| usage("--output", e))?;
        sink.flush().map_err(io_failure(path))?;
    }
    Ok(())
}

fn print_report(r: &TrialReport) {
    let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k} = {v}")).collect();
    println!("experiment: {} ({})", r.experiment, params.join(", "));
    println!("seed: {}", r.seed);
    println!("successes: {} / {}", r.successes, r.trials);
    println!("estimate: {:.6} (95% Wilson interval [{:.6}, {:.6}])", r.estimate, r.wilson_lo, r.wilson_hi);
    for (k, v) in &r.reference {
        println!("{k}: {v:.6}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_modes() {
        let cols = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(header_mode(&cols(&["x1", "x2"])), Some(InputMode::Coordinates));
        assert_eq!(header_mode(&cols(&["d1", "d2", "d3"])), Some(InputMode::Matrix));
        assert_eq!(header_mode(&cols(&["a", "b"])), None);
        assert_eq!(header_mode(&[]), None);
    }

    #[test]
    fn parser_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
