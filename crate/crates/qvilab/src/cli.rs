//! Command-line front end: configuration ingestion, experiment
//! orchestration, and emission of surfaces, reports, and timing sidecars.
//!
//! Subcommands: `validate` (assumption audit), `solve` (Monte Carlo
//! pipeline), `oracle` (finite-difference solve), `compare` (probe-point
//! cross-validation of the two), and `simulate` (strategy evaluation on
//! controlled paths). Every compute subcommand re-validates the problem
//! first and refuses to run on a failing spec.
//!
//! Reports are deterministic for a fixed (config, seed) pair — wall-clock
//! numbers go to a `timings.txt` sidecar so that reports and surfaces are
//! byte-identical across runs and thread counts.

use crate::fdoracle::{self, FdError, FdGrid, FdSolution};
use crate::fixedpoint::{self, ConvergenceReport, ConvergenceStatus, FixedPointError};
use crate::impulse::{ImpulseError, SpatialGrid, StrategyRule, ValueFunction};
use crate::model::{self, FileConfig, ModelError, ProblemSpec, ValidationReport};
use crate::rbsde::{self, RbsdeError, SolveOptions};
use crate::rng;
use crate::sde::{self, SdeError, TimeGrid};
use clap::{Args, Parser, Subcommand};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const REPORT_SCHEMA: u32 = 1;
pub const THREADS_ENV: &str = "QVILAB_THREADS";

#[derive(Error, Debug)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Divergence(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ImpulseError> for CliError {
    fn from(e: ImpulseError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SdeError> for CliError {
    fn from(e: SdeError) -> Self {
        match e {
            SdeError::NonFinite { .. } => CliError::Divergence(e.to_string()),
            SdeError::Io(inner) => CliError::Io(inner.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<RbsdeError> for CliError {
    fn from(e: RbsdeError) -> Self {
        match e {
            RbsdeError::Regression(_) => CliError::Divergence(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<FixedPointError> for CliError {
    fn from(e: FixedPointError) -> Self {
        match e {
            FixedPointError::Config(m) => CliError::Config(m),
            FixedPointError::Sde(inner) => inner.into(),
            FixedPointError::Solve(inner) => inner.into(),
            FixedPointError::Impulse(inner) => inner.into(),
        }
    }
}

impl From<FdError> for CliError {
    fn from(e: FdError) -> Self {
        match e {
            FdError::Sweeps(m) | FdError::Diverged(m) => CliError::Divergence(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

// ─── argument grammar ───

#[derive(Parser, Debug)]
#[command(
    name = "qvilab",
    about = "Impulse-control solver laboratory: Monte Carlo value functions \
             cross-validated against a finite-difference solver",
    version
)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Audit the problem description against the standing assumptions.
    Validate(CommonArgs),
    /// Monte Carlo value function (regression on simulated paths).
    Solve(CommonArgs),
    /// Finite-difference value function on the same problem.
    Oracle(CommonArgs),
    /// Solve with both engines and difference them at probe points.
    Compare(CommonArgs),
    /// Evaluate an intervention strategy on controlled paths.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Problem configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base seed for all randomness in this run.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override [solver] n_paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the time-step count of the engine being run.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the iteration caps ([solver]/[fd] k_max).
    #[arg(long)]
    kmax: Option<usize>,
    /// Override the convergence tolerances ([solver]/[fd] tol).
    #[arg(long)]
    tol: Option<f64>,
    /// Probe points as `t,x1[,x2][;t,x1...]`, overriding [probes].
    #[arg(long)]
    probes: Option<String>,
    /// Engine for `solve`: mc (default) or fd.
    #[arg(long, default_value = "mc")]
    method: String,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Strategy: optimal | never | config (the [strategy] section).
    #[arg(long, default_value = "config")]
    strategy: String,
}

/// Parse argv and run. Returns the process exit code.
pub fn run() -> i32 {
    let args = match CliArgs::try_parse() {
        Ok(a) => a,
        Err(e) => {
            // clap prints its own help/version output through the error
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let result = match args.command {
        Command::Validate(a) => cmd_validate(&a),
        Command::Solve(a) => cmd_solve(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Honour the thread-count environment variable before any parallel work.
fn configure_threads() -> Result<(), CliError> {
    if let Ok(text) = std::env::var(THREADS_ENV) {
        let n: usize = text
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "{THREADS_ENV} must be a positive integer, got {text:?}"
                ))
            })?;
        // ignore the error if a pool already exists (tests, repeated calls);
        // results are bitwise identical at any thread count by design
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

// ─── resolved run setup ───

struct Resolved {
    config: FileConfig,
    spec: ProblemSpec,
    probes: Vec<(f64, Vec<f64>)>,
    seed: u64,
    config_path: String,
}

fn resolve(common: &CommonArgs, steps_targets: StepsTarget) -> Result<Resolved, CliError> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| io_err(&format!("reading {}", common.config.display()), e))?;
    let mut config = FileConfig::parse(&text)?;

    if let Some(p) = common.paths {
        config.solver.n_paths = p;
    }
    if let Some(s) = common.steps {
        match steps_targets {
            StepsTarget::Solver => config.solver.n_steps = s,
            StepsTarget::Fd => config.fd.n_steps = s,
            StepsTarget::Both => {
                config.solver.n_steps = s;
                config.fd.n_steps = s;
            }
        }
    }
    if let Some(k) = common.kmax {
        config.solver.k_max = k;
        config.fd.k_max = k;
    }
    if let Some(t) = common.tol {
        config.solver.tol = t;
        config.fd.tol = t;
    }

    let spec = ProblemSpec::from_sections(&config.problem, &config.actions)?;
    let probes = resolve_probes(common.probes.as_deref(), &config, &spec)?;
    Ok(Resolved {
        config,
        spec,
        probes,
        seed: common.seed,
        config_path: common.config.display().to_string(),
    })
}

#[derive(Clone, Copy)]
enum StepsTarget {
    Solver,
    Fd,
    Both,
}

/// Probe points: the `--probes` flag wins, then the `[probes]` section,
/// then five interior points along the box diagonal at t = 0.
fn resolve_probes(
    flag: Option<&str>,
    config: &FileConfig,
    spec: &ProblemSpec,
) -> Result<Vec<(f64, Vec<f64>)>, CliError> {
    if let Some(text) = flag {
        return parse_probes(text, spec);
    }
    if let Some(section) = &config.probes {
        let mut out = Vec::new();
        for &t in &section.times {
            if !(0.0..=spec.horizon).contains(&t) {
                return Err(CliError::Config(format!(
                    "probe time {t} outside [0, {}]",
                    spec.horizon
                )));
            }
            for p in &section.points {
                if p.len() != spec.state_dim {
                    return Err(CliError::Config(format!(
                        "probe point {p:?} has {} coords, state dimension is {}",
                        p.len(),
                        spec.state_dim
                    )));
                }
                out.push((t, p.clone()));
            }
        }
        if out.is_empty() {
            return Err(CliError::Config(
                "[probes] section present but empty".to_string(),
            ));
        }
        return Ok(out);
    }
    let mut out = Vec::new();
    for i in 1..=5usize {
        let frac = i as f64 / 6.0;
        let point: Vec<f64> = (0..spec.state_dim)
            .map(|a| spec.box_lo[a] + frac * (spec.box_hi[a] - spec.box_lo[a]))
            .collect();
        out.push((0.0, point));
    }
    Ok(out)
}

fn parse_probes(text: &str, spec: &ProblemSpec) -> Result<Vec<(f64, Vec<f64>)>, CliError> {
    let mut out = Vec::new();
    for chunk in text.split(';') {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let fields: Vec<f64> = chunk
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("probe {chunk:?}: {e}")))?;
        if fields.len() != spec.state_dim + 1 {
            return Err(CliError::Usage(format!(
                "probe {chunk:?} needs t followed by {} coordinates",
                spec.state_dim
            )));
        }
        let t = fields[0];
        if !(0.0..=spec.horizon).contains(&t) {
            return Err(CliError::Usage(format!(
                "probe time {t} outside [0, {}]",
                spec.horizon
            )));
        }
        out.push((t, fields[1..].to_vec()));
    }
    if out.is_empty() {
        return Err(CliError::Usage("no probes given".to_string()));
    }
    Ok(out)
}

/// Monte Carlo value grid: the [solver] grid fields, with the problem box
/// at 41 nodes per axis as the default.
fn solver_grid(spec: &ProblemSpec, config: &FileConfig) -> Result<SpatialGrid, CliError> {
    let s = &config.solver;
    let lo = if s.grid_lo.is_empty() {
        spec.box_lo.clone()
    } else {
        s.grid_lo.clone()
    };
    let hi = if s.grid_hi.is_empty() {
        spec.box_hi.clone()
    } else {
        s.grid_hi.clone()
    };
    let counts = if s.grid_counts.is_empty() {
        vec![41; spec.state_dim]
    } else {
        s.grid_counts.clone()
    };
    Ok(SpatialGrid::new(lo, hi, counts)?)
}

/// Finite-difference lattice: the [fd] fields, defaulting to the problem box
/// at 201 nodes per axis in one dimension and 61 in two.
fn fd_grid(spec: &ProblemSpec, config: &FileConfig) -> Result<FdGrid, CliError> {
    let f = &config.fd;
    let lo = if f.box_lo.is_empty() {
        spec.box_lo.clone()
    } else {
        f.box_lo.clone()
    };
    let hi = if f.box_hi.is_empty() {
        spec.box_hi.clone()
    } else {
        f.box_hi.clone()
    };
    let counts = if f.counts.is_empty() {
        vec![if spec.state_dim == 1 { 201 } else { 61 }; spec.state_dim]
    } else {
        f.counts.clone()
    };
    Ok(FdGrid::new(lo, hi, counts, f.n_steps)?)
}

fn starting_point(spec: &ProblemSpec, config: &FileConfig) -> Result<Vec<f64>, CliError> {
    let x0 = &config.solver.x0;
    if x0.is_empty() {
        return Ok((0..spec.state_dim)
            .map(|a| 0.5 * (spec.box_lo[a] + spec.box_hi[a]))
            .collect());
    }
    if x0.len() != spec.state_dim {
        return Err(CliError::Config(format!(
            "solver x0 has {} coords, state dimension is {}",
            x0.len(),
            spec.state_dim
        )));
    }
    Ok(x0.clone())
}

/// Run the assumption audit and refuse to continue on failure. The report
/// file is written either way so the witnesses are inspectable.
fn validate_and_gate(r: &Resolved, out: &Path) -> Result<ValidationReport, CliError> {
    let report = model::validate_spec(&r.spec, r.config.validate.n_samples, r.config.validate.seed);
    write_atomic(&out.join("validation.txt"), &format!("{report}"))?;
    if !report.passed() {
        return Err(CliError::Config(format!(
            "validation failed; see {}",
            out.join("validation.txt").display()
        )));
    }
    Ok(report)
}

// ─── atomic file emission ───

/// Write through a sibling temporary file and rename, so failures leave no
/// partial artifact behind.
pub fn write_atomic(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(&format!("creating {}", dir.display()), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, content).map_err(|e| io_err(&format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path)
        .map_err(|e| io_err(&format!("renaming into {}", path.display()), e))
}

// ─── surface CSV ───

/// Header `t,x1,...,xn,value,stderr`; one row per (time slice, grid node),
/// time-major; floats at 17 significant digits so reload is bit-faithful.
pub fn surface_to_csv(v: &ValueFunction) -> String {
    let grid = v.grid();
    let dim = grid.dim();
    let mut s = String::with_capacity(v.times().len() * grid.n_nodes() * 32);
    s.push('t');
    for j in 1..=dim {
        let _ = write!(s, ",x{j}");
    }
    s.push_str(",value,stderr\n");
    let mut x = vec![0.0; dim];
    for (si, &t) in v.times().iter().enumerate() {
        let vals = v.slice_values(si);
        let errs = v.slice_stderr(si);
        for i in 0..grid.n_nodes() {
            grid.node_into(i, &mut x);
            let _ = write!(s, "{t:.16e}");
            for c in &x {
                let _ = write!(s, ",{c:.16e}");
            }
            let _ = writeln!(s, ",{:.16e},{:.16e}", vals[i], errs[i]);
        }
    }
    s
}

/// Parse a surface CSV back into rows of (t, x..., value, stderr).
pub fn surface_from_csv(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config("surface CSV is empty".to_string()))?;
    if !header.starts_with("t,x1") || !header.ends_with(",value,stderr") {
        return Err(CliError::Config(format!(
            "unexpected surface CSV header {header:?}"
        )));
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(format!("surface CSV line {}: {e}", n + 2)))?;
        if row.len() != width {
            return Err(CliError::Config(format!(
                "surface CSV line {} has {} fields, expected {width}",
                n + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

// ─── report rendering ───

struct Report {
    body: String,
}

impl Report {
    fn new(subcommand: &str, r: &Resolved, method: &str) -> Report {
        let mut body = String::new();
        let _ = writeln!(body, "qvilab report");
        let _ = writeln!(body, "schema = {REPORT_SCHEMA}");
        let _ = writeln!(body);
        let _ = writeln!(body, "[run]");
        let _ = writeln!(body, "subcommand = {subcommand}");
        let _ = writeln!(body, "method = {method}");
        let _ = writeln!(body, "config = {}", r.config_path);
        let _ = writeln!(body, "seed = {}", r.seed);
        Report { body }
    }

    fn section(&mut self, name: &str) {
        let _ = writeln!(self.body);
        let _ = writeln!(self.body, "[{name}]");
    }

    fn line(&mut self, text: &str) {
        let _ = writeln!(self.body, "{text}");
    }

    fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.body, "{key} = {value}");
    }

    /// Resolved config echo, indented so the embedded TOML cannot be
    /// mistaken for report sections.
    fn config_echo(&mut self, config: &FileConfig) -> Result<(), CliError> {
        self.section("config");
        let text = toml::to_string(config)
            .map_err(|e| CliError::Config(format!("re-serializing the config: {e}")))?;
        for line in text.lines() {
            let _ = writeln!(self.body, "  {line}");
        }
        Ok(())
    }

    fn validation(&mut self, report: &ValidationReport) {
        self.section("validation");
        for line in format!("{report}").lines() {
            let _ = writeln!(self.body, "{line}");
        }
    }

    fn convergence(&mut self, report: &ConvergenceReport) {
        self.section("convergence");
        self.kv("status", format!("{:?}", report.status).to_lowercase());
        self.kv("tolerance", fmt_f(report.tolerance));
        self.kv("final_increment", fmt_f(report.final_increment));
        self.line("iteration  sup_increment  weighted_increment  contraction_ratio  stderr  inner_iterations");
        for rec in &report.iterations {
            let _ = writeln!(
                self.body,
                "{}  {}  {}  {}  {}  {}",
                rec.iteration,
                fmt_f(rec.sup_increment),
                rec.weighted_increment.map_or("-".to_string(), fmt_f),
                rec.contraction_ratio.map_or("-".to_string(), fmt_f),
                fmt_f(rec.stderr),
                rec.inner_iterations
                    .map_or("-".to_string(), |n| n.to_string()),
            );
        }
    }

    fn estimates(&mut self, dim: usize, rows: &[(f64, Vec<f64>, f64, f64)]) {
        self.section("estimates");
        let mut header = "t".to_string();
        for j in 1..=dim {
            let _ = write!(header, "  x{j}");
        }
        header.push_str("  value  stderr");
        self.line(&header);
        for (t, x, v, se) in rows {
            let mut row = fmt_f(*t);
            for c in x {
                let _ = write!(row, "  {}", fmt_f(*c));
            }
            let _ = write!(row, "  {}  {}", fmt_f(*v), fmt_f(*se));
            self.line(&row);
        }
    }

    fn files(&mut self, names: &[&str]) {
        self.section("files");
        for n in names {
            self.line(n);
        }
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// Wall-clock sidecar: everything here may differ between runs.
fn write_timings(out: &Path, phases: &[(String, f64)]) -> Result<(), CliError> {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "threads = {}",
        std::env::var(THREADS_ENV).unwrap_or_else(|_| "default".to_string())
    );
    for (name, secs) in phases {
        let _ = writeln!(s, "{name}_seconds = {secs:.6}");
    }
    write_atomic(&out.join("timings.txt"), &s)
}

// ─── subcommands ───

fn cmd_validate(common: &CommonArgs) -> Result<(), CliError> {
    let tick = Instant::now();
    let r = resolve(common, StepsTarget::Both)?;
    let report =
        model::validate_spec(&r.spec, r.config.validate.n_samples, r.config.validate.seed);
    write_atomic(&common.out.join("validation.txt"), &format!("{report}"))?;

    let mut rep = Report::new("validate", &r, "-");
    rep.config_echo(&r.config)?;
    rep.validation(&report);
    rep.files(&["validation.txt"]);
    write_atomic(&common.out.join("report.txt"), &rep.body)?;
    write_timings(
        &common.out,
        &[("total".to_string(), tick.elapsed().as_secs_f64())],
    )?;
    println!("{report}");
    if !report.passed() {
        return Err(CliError::Config(
            "validation failed; witnesses are in validation.txt".to_string(),
        ));
    }
    Ok(())
}

/// The Monte Carlo pipeline: ladder for local drivers, outer fixed point
/// when the driver references the value function.
fn solve_mc(r: &Resolved) -> Result<(ValueFunction, ConvergenceReport), CliError> {
    let grid = solver_grid(&r.spec, &r.config)?;
    let result = if r.spec.is_nonlocal() {
        fixedpoint::solve_nonlocal(&r.spec, &grid, &r.config.solver, Some(&r.config.norm), r.seed)?
    } else {
        fixedpoint::solve_local(
            &r.spec,
            &grid,
            &r.config.solver,
            Some(&r.config.norm),
            None,
            r.seed,
        )?
    };
    if result.1.status == ConvergenceStatus::Diverged {
        return Err(CliError::Divergence(format!(
            "iteration diverged; final increment {:.3e}",
            result.1.final_increment
        )));
    }
    Ok(result)
}

fn solve_fd(r: &Resolved) -> Result<(FdSolution, Vec<f64>), CliError> {
    let grid = fd_grid(&r.spec, &r.config)?;
    if r.spec.is_nonlocal() {
        Ok(fdoracle::fd_solve_nonlocal_qvi(&r.spec, &grid, &r.config.fd)?)
    } else {
        let sol = fdoracle::fd_solve_local_qvi(&r.spec, &grid, &r.config.fd, None)?;
        Ok((sol, Vec::new()))
    }
}

fn probe_rows(
    v: &ValueFunction,
    probes: &[(f64, Vec<f64>)],
) -> Vec<(f64, Vec<f64>, f64, f64)> {
    probes
        .iter()
        .map(|(t, x)| (*t, x.clone(), v.eval(*t, x), v.stderr_at(*t, x)))
        .collect()
}

fn cmd_solve(common: &CommonArgs) -> Result<(), CliError> {
    match common.method.as_str() {
        "mc" => {}
        "fd" => return cmd_oracle(common),
        other => {
            return Err(CliError::Usage(format!(
                "--method must be mc or fd, got {other:?}"
            )))
        }
    }
    let tick = Instant::now();
    let r = resolve(common, StepsTarget::Solver)?;
    let validation = validate_and_gate(&r, &common.out)?;
    let validate_secs = tick.elapsed().as_secs_f64();

    let solve_tick = Instant::now();
    let (surface, convergence) = solve_mc(&r)?;
    let solve_secs = solve_tick.elapsed().as_secs_f64();

    write_atomic(&common.out.join("surface.csv"), &surface_to_csv(&surface))?;
    let mut rep = Report::new("solve", &r, "mc");
    rep.config_echo(&r.config)?;
    rep.validation(&validation);
    rep.convergence(&convergence);
    rep.estimates(r.spec.state_dim, &probe_rows(&surface, &r.probes));
    rep.files(&["validation.txt", "surface.csv"]);
    write_atomic(&common.out.join("report.txt"), &rep.body)?;

    let mut phases = vec![
        ("validate".to_string(), validate_secs),
        ("solve".to_string(), solve_secs),
    ];
    for rec in &convergence.iterations {
        phases.push((format!("iteration_{}", rec.iteration), rec.wall_seconds));
    }
    phases.push(("total".to_string(), tick.elapsed().as_secs_f64()));
    write_timings(&common.out, &phases)?;
    println!(
        "solve: {} after {} iterations, final increment {:.3e}",
        format!("{:?}", convergence.status).to_lowercase(),
        convergence.iterations.len(),
        convergence.final_increment
    );
    Ok(())
}

fn cmd_oracle(common: &CommonArgs) -> Result<(), CliError> {
    let tick = Instant::now();
    let r = resolve(common, StepsTarget::Fd)?;
    let validation = validate_and_gate(&r, &common.out)?;
    let validate_secs = tick.elapsed().as_secs_f64();

    let solve_tick = Instant::now();
    let (sol, increments) = solve_fd(&r)?;
    let solve_secs = solve_tick.elapsed().as_secs_f64();

    write_atomic(&common.out.join("surface.csv"), &surface_to_csv(&sol.value))?;
    let mut rep = Report::new("oracle", &r, "fd");
    rep.config_echo(&r.config)?;
    rep.validation(&validation);
    rep.section("diagnostics");
    rep.kv("feasibility_gap", fmt_f(sol.feasibility_gap));
    rep.kv("complementarity_gap", fmt_f(sol.complementarity_gap));
    rep.kv("max_contact_sweeps", sol.max_contact_sweeps);
    if !increments.is_empty() {
        rep.section("outer_iterations");
        rep.line("iteration  sup_increment");
        for (i, inc) in increments.iter().enumerate() {
            let _ = writeln!(rep.body, "{}  {}", i + 1, fmt_f(*inc));
        }
    }
    rep.estimates(r.spec.state_dim, &probe_rows(&sol.value, &r.probes));
    rep.files(&["validation.txt", "surface.csv"]);
    write_atomic(&common.out.join("report.txt"), &rep.body)?;
    write_timings(
        &common.out,
        &[
            ("validate".to_string(), validate_secs),
            ("solve".to_string(), solve_secs),
            ("total".to_string(), tick.elapsed().as_secs_f64()),
        ],
    )?;
    println!(
        "oracle: feasibility gap {:.2e}, complementarity gap {:.2e}",
        sol.feasibility_gap, sol.complementarity_gap
    );
    Ok(())
}

/// A coarsened copy of the FD lattice for the Richardson error estimate:
/// half the nodes per axis, half the steps.
fn halved_fd_grid(grid: &FdGrid) -> Result<FdGrid, CliError> {
    let space = grid.space();
    let counts: Vec<usize> = space
        .counts()
        .iter()
        .map(|&c| ((c - 1) / 2 + 1).max(3))
        .collect();
    Ok(FdGrid::new(
        space.lo().to_vec(),
        space.hi().to_vec(),
        counts,
        (grid.n_steps() / 2).max(1),
    )?)
}

fn cmd_compare(common: &CommonArgs) -> Result<(), CliError> {
    let tick = Instant::now();
    let r = resolve(common, StepsTarget::Both)?;
    let validation = validate_and_gate(&r, &common.out)?;
    let validate_secs = tick.elapsed().as_secs_f64();

    let mc_tick = Instant::now();
    let (mc_surface, convergence) = solve_mc(&r)?;
    let mc_secs = mc_tick.elapsed().as_secs_f64();

    let fd_tick = Instant::now();
    let (fd_sol, _) = solve_fd(&r)?;
    // half resolution for the Richardson error estimate
    let coarse_grid = halved_fd_grid(&fd_grid(&r.spec, &r.config)?)?;
    let fd_coarse = if r.spec.is_nonlocal() {
        fdoracle::fd_solve_nonlocal_qvi(&r.spec, &coarse_grid, &r.config.fd)?.0
    } else {
        fdoracle::fd_solve_local_qvi(&r.spec, &coarse_grid, &r.config.fd, None)?
    };
    let fd_secs = fd_tick.elapsed().as_secs_f64();

    write_atomic(
        &common.out.join("surface_mc.csv"),
        &surface_to_csv(&mc_surface),
    )?;
    write_atomic(
        &common.out.join("surface_fd.csv"),
        &surface_to_csv(&fd_sol.value),
    )?;

    let mut rep = Report::new("compare", &r, "mc+fd");
    rep.config_echo(&r.config)?;
    rep.validation(&validation);
    rep.convergence(&convergence);
    rep.section("comparison");
    let mut header = "t".to_string();
    for j in 1..=r.spec.state_dim {
        let _ = write!(header, "  x{j}");
    }
    header.push_str("  mc_value  mc_stderr  fd_value  fd_error  abs_diff  tolerance  status");
    rep.line(&header);
    let mut all_pass = true;
    for (t, x) in &r.probes {
        let mc_v = mc_surface.eval(*t, x);
        let mc_se = mc_surface.stderr_at(*t, x);
        let fd_v = fd_sol.value.eval(*t, x);
        let fd_err = (fd_v - fd_coarse.value.eval(*t, x)).abs();
        let diff = (mc_v - fd_v).abs();
        let tol = (0.02 * (1.0 + fd_v.abs())).max(3.0 * mc_se + fd_err);
        let pass = diff <= tol;
        all_pass &= pass;
        let mut row = fmt_f(*t);
        for c in x {
            let _ = write!(row, "  {}", fmt_f(*c));
        }
        let _ = write!(
            row,
            "  {}  {}  {}  {}  {}  {}  {}",
            fmt_f(mc_v),
            fmt_f(mc_se),
            fmt_f(fd_v),
            fmt_f(fd_err),
            fmt_f(diff),
            fmt_f(tol),
            if pass { "pass" } else { "FAIL" }
        );
        rep.line(&row);
    }
    rep.kv("overall", if all_pass { "pass" } else { "FAIL" });
    rep.files(&["validation.txt", "surface_mc.csv", "surface_fd.csv"]);
    write_atomic(&common.out.join("report.txt"), &rep.body)?;
    write_timings(
        &common.out,
        &[
            ("validate".to_string(), validate_secs),
            ("solve_mc".to_string(), mc_secs),
            ("solve_fd".to_string(), fd_secs),
            ("total".to_string(), tick.elapsed().as_secs_f64()),
        ],
    )?;
    println!(
        "compare: {} at {} probes",
        if all_pass { "pass" } else { "FAIL" },
        r.probes.len()
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let common = &args.common;
    let tick = Instant::now();
    let r = resolve(common, StepsTarget::Solver)?;
    let validation = validate_and_gate(&r, &common.out)?;
    let validate_secs = tick.elapsed().as_secs_f64();

    let kind = match args.strategy.as_str() {
        "config" => r
            .config
            .strategy
            .as_ref()
            .map(|s| s.kind.clone())
            .unwrap_or_else(|| "optimal".to_string()),
        other => other.to_string(),
    };

    // the optimal rule needs the solved surface; a frozen copy also feeds
    // the path-wise evaluation when the driver references the value function
    let solve_tick = Instant::now();
    let needs_surface = kind == "optimal" || r.spec.is_nonlocal();
    let surface = if needs_surface {
        Some(solve_mc(&r)?.0)
    } else {
        None
    };
    let solve_secs = solve_tick.elapsed().as_secs_f64();

    let section = r.config.strategy.clone();
    let rule = match kind.as_str() {
        "optimal" => {
            let v = surface.as_ref().expect("surface solved above");
            StrategyRule::Optimal {
                value: v,
                tie_tol: r.config.solver.tie_tol,
            }
        }
        "never" => StrategyRule::Never,
        "threshold" => {
            let s = section.as_ref().ok_or_else(|| {
                CliError::Config(
                    "threshold strategy needs a [strategy] section with an indicator".to_string(),
                )
            })?;
            if s.indicator.is_empty() {
                return Err(CliError::Config(
                    "threshold strategy has an empty indicator".to_string(),
                ));
            }
            StrategyRule::threshold(&s.indicator, s.action_index, &r.spec)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "strategy must be optimal, never, threshold, or config, got {other:?}"
            )))
        }
    };
    let cap = section
        .as_ref()
        .map(|s| s.cap)
        .filter(|&c| c > 0)
        .unwrap_or(r.config.solver.impulse_cap);

    let sim_tick = Instant::now();
    let x0 = starting_point(&r.spec, &r.config)?;
    let grid = TimeGrid::new(0.0, r.spec.horizon, r.config.solver.n_steps)?;
    let controlled = sde::simulate_controlled(
        &r.spec,
        &rule,
        &x0,
        &grid,
        r.config.solver.n_paths,
        rng::derive(r.seed, 0x7369_6d75),
        cap,
    )?;
    let options = solve_options_for(&r)?;
    let payoff = rbsde::evaluate_impulse_value(&r.spec, &controlled, surface.as_ref(), &options)?;
    let sim_secs = sim_tick.elapsed().as_secs_f64();

    // impulse statistics
    let n_paths = r.config.solver.n_paths;
    let mut total_events = 0usize;
    let mut max_events = 0usize;
    let mut capped = 0usize;
    let mut total_cost = 0.0f64;
    for c in &controlled.controls {
        total_events += c.events.len();
        max_events = max_events.max(c.events.len());
        capped += usize::from(c.capped);
        total_cost += c.events.iter().map(|e| e.cost).sum::<f64>();
    }

    let mut rep = Report::new("simulate", &r, "mc");
    rep.config_echo(&r.config)?;
    rep.validation(&validation);
    rep.section("strategy");
    rep.kv("kind", &kind);
    if let Some(s) = &section {
        if kind == "threshold" {
            rep.kv("indicator", format!("{:?}", s.indicator));
            rep.kv("action_index", s.action_index);
        }
    }
    rep.kv("x0", fmt_vec(&x0));
    rep.kv("paths", n_paths);
    rep.kv("p_hat", fmt_f(payoff.value));
    rep.kv("p_stderr", fmt_f(payoff.stderr));
    rep.kv(
        "mean_impulses",
        fmt_f(total_events as f64 / n_paths as f64),
    );
    rep.kv("max_impulses", max_events);
    rep.kv("capped_paths", capped);
    rep.kv(
        "mean_intervention_cost",
        fmt_f(total_cost / n_paths as f64),
    );
    rep.kv("confinement_warnings", controlled.confinement_warnings);
    if let Some(v) = &surface {
        rep.kv("surface_value_at_x0", fmt_f(v.eval(0.0, &x0)));
        rep.kv("surface_stderr_at_x0", fmt_f(v.stderr_at(0.0, &x0)));
    }
    rep.files(&["validation.txt"]);
    write_atomic(&common.out.join("report.txt"), &rep.body)?;
    write_timings(
        &common.out,
        &[
            ("validate".to_string(), validate_secs),
            ("solve".to_string(), solve_secs),
            ("simulate".to_string(), sim_secs),
            ("total".to_string(), tick.elapsed().as_secs_f64()),
        ],
    )?;
    println!(
        "simulate ({kind}): p_hat = {:.6} ± {:.6}, mean impulses {:.3}",
        payoff.value,
        payoff.stderr,
        total_events as f64 / n_paths as f64
    );
    Ok(())
}

fn solve_options_for(r: &Resolved) -> Result<SolveOptions, CliError> {
    Ok(fixedpoint::solver_options(&r.spec, &r.config.solver)
        .map_err(CliError::from)?)
}

fn fmt_vec(v: &[f64]) -> String {
    let mut s = "[".to_string();
    for (i, c) in v.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{c}");
    }
    s.push(']');
    s
}
