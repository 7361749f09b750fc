//! Command-line driver. [`run`] returns the process exit code: 0 on success,
//! 2 on invalid input or configuration, 3 on a numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use optsensor::densela::closed_form_checks;
use optsensor::experiments::{
    rule_of_thumb_sensor, run_fig1, run_fig2, ExperimentConfig, ExperimentOutput,
};
use optsensor::extremal::{gamma_star, signature_census};
use optsensor::flow::{flow_run, FlowOptions};
use optsensor::io::{matrix_serde, MatrixJson};
use optsensor::isospectral::{
    projector_from_sensor, random_projector, random_projector_from, sensor_from_projector,
    SensorMatrix,
};
use optsensor::kalmansim::{simulate_error_cov, InnovationSign, SimConfig};
use optsensor::objective::{cost_j, SensorProblem};
use optsensor::{rng, Error, Matrix, StableMatrix, SymPosDef};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Largest `n` for which `design` cross-checks against the extremal census.
const DESIGN_CENSUS_MAX_N: usize = 8;
const DESIGN_RANDOM_STARTS: usize = 4;

#[derive(Parser, Debug)]
#[command(
    name = "optsensor",
    version,
    about = "Optimal sensor and actuator design for steady-state Kalman filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// `sensor` or `actuator`; the mathematics is identical, only labels differ.
    #[arg(long, global = true, value_enum, default_value_t = Mode::Sensor)]
    mode: Mode,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; results go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Overrides the sample count of `fig1`/`fig2` and the path count of `verify-kalman`.
    #[arg(long, global = true)]
    samples: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Sensor,
    Actuator,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimal projector for one problem (`--config` problem file).
    Design,
    /// Continued extremals and their Hessian signatures.
    Enumerate,
    /// One gradient flow run from a random start.
    Flow,
    /// Gain at which the small-gain signature picture first breaks.
    Gammastar {
        #[arg(long, default_value_t = 10.0)]
        gamma_max: f64,
    },
    /// Fraction of systems with `γ < γ*`.
    Fig1,
    /// Rule-of-thumb and random sensors against the optimum.
    Fig2,
    /// Monte Carlo check that `tr P` is the filter's mean-squared error.
    VerifyKalman {
        /// Use the negated innovation gain (negative control).
        #[arg(long)]
        literal_minus: bool,
        /// Also write per-path traces (needs `--out`).
        #[arg(long)]
        path_csv: bool,
    },
    /// Closed-form solver checks.
    Selftest,
}

/// A single design instance. `Q` and `L` default to the identity.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    #[serde(rename = "A")]
    a: MatrixJson,
    #[serde(rename = "Q", default)]
    q: Option<MatrixJson>,
    #[serde(rename = "L", default)]
    l: Option<MatrixJson>,
    gamma: f64,
    p: usize,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_SOLVER
            },
            message: e.to_string(),
        }
    }
}

fn validation(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Design => design(g),
        Command::Enumerate => enumerate(g),
        Command::Flow => flow(g),
        Command::Gammastar { gamma_max } => gammastar(g, *gamma_max),
        Command::Fig1 => figure(g, "fig1"),
        Command::Fig2 => figure(g, "fig2"),
        Command::VerifyKalman {
            literal_minus,
            path_csv,
        } => verify_kalman(g, *literal_minus, *path_csv),
        Command::Selftest => selftest(),
    }
}

fn read_config(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))
}

/// serde_json messages carry the line and column of the problem.
fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text)
        .map_err(|e| validation(format!("invalid config {}: {e}", path.display())))
}

fn load_problem(g: &Global) -> CliResult<SensorProblem> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| validation("this command needs --config <problem.json>"))?;
    let pf: ProblemFile = parse_json(path, &read_config(path)?)?;
    let a = StableMatrix::new(Matrix::try_from(pf.a)?)?;
    let n = a.dim();
    let weight = |m: Option<MatrixJson>| -> CliResult<SymPosDef> {
        Ok(match m {
            Some(j) => SymPosDef::new(Matrix::try_from(j)?)?,
            None => SymPosDef::identity(n),
        })
    };
    let q = weight(pf.q)?;
    let l = weight(pf.l)?;
    Ok(SensorProblem::new(a, q, l, pf.gamma, pf.p)?)
}

fn emit(g: &Global, file_name: &str, content: &str) -> CliResult<()> {
    match &g.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(Error::from)?;
            fs::write(dir.join(file_name), content).map_err(Error::from)?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialization cannot fail");
    s.push('\n');
    s
}

fn role(mode: Mode) -> &'static str {
    match mode {
        Mode::Sensor => "sensor",
        Mode::Actuator => "actuator",
    }
}

#[derive(Serialize)]
struct DesignReport {
    mode: Mode,
    role: &'static str,
    #[serde(with = "matrix_serde")]
    c: Matrix,
    #[serde(rename = "J")]
    j: f64,
    grad_norm: f64,
    starts: usize,
    converged_starts: usize,
    #[serde(rename = "census_min_J")]
    census_min_j: Option<f64>,
    census_agrees: Option<bool>,
}

fn design(g: &Global) -> CliResult<()> {
    let problem = load_problem(g)?;
    let (n, p) = (problem.n(), problem.p());
    let c0 = rule_of_thumb_sensor(problem.a(), problem.q(), problem.l(), p)?;
    let mut starts = vec![projector_from_sensor(&c0)];
    let mut r = rng::stream(g.seed.unwrap_or(0), 0);
    for _ in 0..DESIGN_RANDOM_STARTS {
        starts.push(random_projector_from(&mut r, n, p)?);
    }
    let opts = FlowOptions::default();
    let mut best: Option<optsensor::flow::FlowTrace> = None;
    let mut converged = 0;
    for s in &starts {
        let trace = flow_run(&problem, s, &opts)?;
        if trace.converged {
            converged += 1;
        }
        if best.as_ref().is_none_or(|b| trace.final_j() < b.final_j()) {
            best = Some(trace);
        }
    }
    let best = best.expect("at least one start");
    let (census_min_j, census_agrees) = if n <= DESIGN_CENSUS_MAX_N {
        let census = signature_census(problem.a(), problem.q(), problem.l(), p, problem.gamma())?;
        let min = census
            .records
            .iter()
            .map(|r| r.j)
            .fold(f64::INFINITY, f64::min);
        let agrees = (best.final_j() - min).abs() <= 1e-8 * min.abs().max(1.0);
        (Some(min), Some(agrees))
    } else {
        (None, None)
    };
    let report = DesignReport {
        mode: g.mode,
        role: role(g.mode),
        c: sensor_from_projector(&best.final_c)?.matrix().clone(),
        j: best.final_j(),
        grad_norm: best.final_grad_norm(),
        starts: starts.len(),
        converged_starts: converged,
        census_min_j,
        census_agrees,
    };
    emit(g, "design.json", &to_json(&report))
}

fn enumerate(g: &Global) -> CliResult<()> {
    let problem = load_problem(g)?;
    let census = signature_census(
        problem.a(),
        problem.q(),
        problem.l(),
        problem.p(),
        problem.gamma(),
    )?;
    match g.format {
        Format::Csv => emit(g, "extremals.csv", &census.to_csv()?),
        Format::Json => emit(g, "extremals.json", &to_json(&census)),
    }
}

fn flow(g: &Global) -> CliResult<()> {
    let problem = load_problem(g)?;
    let c0 = random_projector(problem.n(), problem.p(), g.seed.unwrap_or(0))?;
    let trace = flow_run(&problem, &c0, &FlowOptions::default())?;
    match g.format {
        Format::Csv => emit(g, "flow.csv", &trace.to_csv()?),
        Format::Json => emit(g, "flow.json", &(trace.summary_json() + "\n")),
    }
}

fn gammastar(g: &Global, gamma_max: f64) -> CliResult<()> {
    let problem = load_problem(g)?;
    let gs = gamma_star(
        problem.a(),
        problem.q(),
        problem.l(),
        problem.p(),
        gamma_max,
        optsensor::experiments::FIG1_SCAN_POINTS,
    )?;
    emit(g, "gammastar.json", &to_json(&gs))
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config: &'a ExperimentConfig,
    config_sha256: String,
    master_seed: u64,
    version: &'static str,
    wall_time_seconds: f64,
    faithful: bool,
    assumptions: &'a [String],
    excluded_samples: &'a [(f64, usize)],
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn figure(g: &Global, which: &str) -> CliResult<()> {
    let mut cfg = match &g.config {
        Some(path) => parse_json::<ExperimentConfig>(path, &read_config(path)?)?,
        None if which == "fig1" => ExperimentConfig::fig1_default(),
        None => ExperimentConfig::fig2_default(),
    };
    if let Some(s) = g.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = g.samples {
        cfg.n_samples = n;
    }
    cfg.validate()?;
    let start = Instant::now();
    let out: ExperimentOutput = if which == "fig1" {
        run_fig1(&cfg)?
    } else {
        run_fig2(&cfg)?
    };
    let wall = start.elapsed().as_secs_f64();
    let canonical = serde_json::to_string(&cfg).expect("config serializes");
    let manifest = Manifest {
        experiment: which,
        config: &cfg,
        config_sha256: sha256_hex(canonical.as_bytes()),
        master_seed: cfg.master_seed,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_seconds: wall,
        faithful: out.faithful,
        assumptions: &out.assumptions,
        excluded_samples: &out.failures,
    };
    if !out.faithful {
        eprintln!("note: {which} configuration differs from the reference setup");
    }
    match g.format {
        Format::Csv => emit(g, &format!("{which}.csv"), &out.to_csv()?)?,
        Format::Json => emit(g, &format!("{which}.json"), &to_json(&out.rows))?,
    }
    if g.out.is_some() {
        emit(g, &format!("{which}_manifest.json"), &to_json(&manifest))?;
    }
    Ok(())
}

/// The two-state reference instance: `A = diag(−1, −2)`, `G = I`, `c = (1, 0)`, `γ = 1`.
fn verify_kalman(g: &Global, literal_minus: bool, path_csv: bool) -> CliResult<()> {
    if g.config.is_some() {
        return Err(validation(
            "verify-kalman runs a fixed instance and takes no --config",
        ));
    }
    if path_csv && g.out.is_none() {
        return Err(validation("--path-csv needs --out"));
    }
    let a = StableMatrix::new(Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]))?;
    let mut cfg = SimConfig::new(
        a,
        Matrix::identity(2, 2),
        SensorMatrix::from_vector(&[1.0, 0.0])?,
        1.0,
        1e-3,
        200.0,
    );
    cfg.seed = g.seed.unwrap_or(0);
    if let Some(n) = g.samples {
        cfg.n_paths = n;
    }
    if literal_minus {
        cfg.innovation = InnovationSign::Minus;
    }
    let res = simulate_error_cov(&cfg)?;
    emit(g, "kalman.json", &(res.to_json() + "\n"))?;
    if path_csv {
        emit(g, "kalman_paths.csv", &res.path_traces_csv()?)?;
    }
    Ok(())
}

fn selftest() -> CliResult<()> {
    let mut failed = 0;
    let mut report = |name: &str, err: f64| {
        let ok = err < 1e-10;
        if !ok {
            failed += 1;
        }
        println!("{} {name}: error {err:e}", if ok { "PASS" } else { "FAIL" });
    };
    for (name, err) in closed_form_checks()? {
        report(name, err);
    }
    // diagonal design: the first coordinate axis is optimal
    let a = StableMatrix::new(Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]))?;
    let problem = SensorProblem::new(a, SymPosDef::identity(2), SymPosDef::identity(2), 0.1, 1)?;
    let c0 = rule_of_thumb_sensor(problem.a(), problem.q(), problem.l(), 1)?;
    let e1 = SensorMatrix::from_vector(&[1.0, 0.0])?;
    report("diagonal rule of thumb", (c0.matrix() - e1.matrix()).amax());
    let j_e1 = cost_j(&problem, &projector_from_sensor(&e1))?;
    let j_e2 = cost_j(
        &problem,
        &projector_from_sensor(&SensorMatrix::from_vector(&[0.0, 1.0])?),
    )?;
    report(
        "diagonal design ordering",
        if j_e1 < j_e2 { 0.0 } else { 1.0 },
    );
    if failed > 0 {
        return Err(Failure {
            code: EXIT_SOLVER,
            message: format!("{failed} self-test check(s) failed"),
        });
    }
    Ok(())
}
