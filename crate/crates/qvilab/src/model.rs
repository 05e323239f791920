//! Problem descriptions: loading from config text and sample-based
//! validation of the structural assumptions the solvers rely on.
//!
//! A problem is a controlled diffusion with impulse interventions: state
//! dynamics `(drift, vol)`, a driver `f(t, x, y, z)` (possibly referencing
//! the value function through `V(...)`), a terminal reward, a finite action
//! set with an impulse map `Γ(t, x, b)` and an intervention cost
//! `ℓ(t, x, b)`, plus the growth/Lipschitz constants the theory needs.
//! Validation draws random sample points and reports each violated
//! assumption with a concrete witness — failures are reported, never thrown.

use crate::expr::{self, EvalContext, Expression, Var, VarSet};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::sync::Mutex;
use std::fmt;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("config is not valid TOML: {0}")]
    Toml(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("failed to parse {field}: {source}")]
    BadExpression {
        field: String,
        source: expr::ParseError,
    },
}

// ─── config file sections ───

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(default = "default_one")]
    pub state_dim: usize,
    #[serde(default = "default_one")]
    pub noise_dim: usize,
    pub horizon: f64,
    pub drift: Vec<String>,
    pub vol: Vec<Vec<String>>,
    pub driver: String,
    pub terminal: String,
    pub impulse: Vec<String>,
    pub cost: String,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    #[serde(default)]
    pub constants: ConstantsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    pub confinement_radius: f64,
    pub cost_floor: f64,
    pub driver_lipschitz: f64,
    pub growth_power: f64,
    pub driver_growth: f64,
    pub terminal_growth: f64,
    pub coeff_growth: f64,
    pub coeff_lipschitz: f64,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        ConstantsSection {
            confinement_radius: 1.0,
            cost_floor: 1e-3,
            driver_lipschitz: 1.0,
            growth_power: 2.0,
            driver_growth: 1.0,
            terminal_growth: 1.0,
            coeff_growth: 1.0,
            coeff_lipschitz: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ActionsSection {
    /// Explicit action points, each of dimension m.
    #[serde(default)]
    pub list: Vec<Vec<f64>>,
    /// Alternatively a box discretization: per-axis lo/hi/count.
    #[serde(default)]
    pub box_lo: Vec<f64>,
    #[serde(default)]
    pub box_hi: Vec<f64>,
    #[serde(default)]
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub basis: String,
    pub degree: usize,
    pub bins: Vec<usize>,
    pub k_max: usize,
    pub tol: f64,
    pub grid_lo: Vec<f64>,
    pub grid_hi: Vec<f64>,
    pub grid_counts: Vec<usize>,
    pub x0: Vec<f64>,
    pub picard_refine: bool,
    pub fresh_noise_per_iteration: bool,
    pub impulse_cap: usize,
    pub probe_points_per_axis: usize,
    pub probe_time_slices: usize,
    pub condition_limit: f64,
    pub fallback_bins: usize,
    pub tie_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            n_paths: 20_000,
            n_steps: 100,
            basis: "poly".to_string(),
            degree: 6,
            bins: Vec::new(),
            k_max: 20,
            tol: 1e-2,
            grid_lo: Vec::new(),
            grid_hi: Vec::new(),
            grid_counts: Vec::new(),
            x0: Vec::new(),
            picard_refine: false,
            fresh_noise_per_iteration: false,
            impulse_cap: 0,
            probe_points_per_axis: 33,
            probe_time_slices: 9,
            condition_limit: 1e10,
            fallback_bins: 16,
            tie_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdSection {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub counts: Vec<usize>,
    pub n_steps: usize,
    pub theta: f64,
    pub max_sweeps: usize,
    pub lcp_tol: f64,
    pub lcp_max_iter: usize,
    pub k_max: usize,
    pub tol: f64,
}

impl Default for FdSection {
    fn default() -> Self {
        FdSection {
            box_lo: Vec::new(),
            box_hi: Vec::new(),
            counts: Vec::new(),
            n_steps: 200,
            theta: 1.0,
            max_sweeps: 50,
            lcp_tol: 1e-10,
            lcp_max_iter: 20_000,
            k_max: 20,
            tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormSection {
    pub kappa: f64,
    pub radius: f64,
    pub dom_coeff: f64,
    pub alphas: Vec<Vec<f64>>,
    pub n_paths: usize,
}

impl Default for NormSection {
    fn default() -> Self {
        NormSection {
            kappa: 0.0,
            radius: 0.0, // 0 → derived from the problem box
            dom_coeff: 4.0,
            alphas: Vec::new(), // empty → {-1, 0, 1} per coordinate
            n_paths: 2_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesSection {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub kind: String,
    #[serde(default)]
    pub indicator: String,
    #[serde(default)]
    pub action_index: usize,
    #[serde(default)]
    pub cap: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection {
            n_samples: 500,
            seed: 1,
        }
    }
}

/// The whole config file. `[problem]` and `[actions]` define the problem;
/// the remaining sections tune the two solver pipelines.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub problem: ProblemSection,
    pub actions: ActionsSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub fd: FdSection,
    #[serde(default)]
    pub norm: NormSection,
    #[serde(default)]
    pub probes: Option<ProbesSection>,
    #[serde(default)]
    pub strategy: Option<StrategySection>,
    #[serde(default)]
    pub validate: ValidateSection,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Toml(e.to_string()))
    }
}

// ─── runtime problem description ───

#[derive(Debug, Clone, Copy)]
pub struct Constants {
    /// Ball radius interventions are confined to: |Γ(t,x,b)| ≤ max(radius, |x|).
    pub confinement_radius: f64,
    /// Uniform lower bound on intervention costs.
    pub cost_floor: f64,
    /// Lipschitz constant of the driver in (y, z, value slot).
    pub driver_lipschitz: f64,
    /// Polynomial growth power of driver and terminal reward.
    pub growth_power: f64,
    pub driver_growth: f64,
    pub terminal_growth: f64,
    /// Linear growth constant of drift and volatility.
    pub coeff_growth: f64,
    pub coeff_lipschitz: f64,
}

impl From<&ConstantsSection> for Constants {
    fn from(c: &ConstantsSection) -> Self {
        Constants {
            confinement_radius: c.confinement_radius,
            cost_floor: c.cost_floor,
            driver_lipschitz: c.driver_lipschitz,
            growth_power: c.growth_power,
            driver_growth: c.driver_growth,
            terminal_growth: c.terminal_growth,
            coeff_growth: c.coeff_growth,
            coeff_lipschitz: c.coeff_lipschitz,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    pub drift: Vec<Expression>,
    /// Row i, column j: diffusion loading of state coordinate i on noise j.
    pub vol: Vec<Vec<Expression>>,
    pub driver: Expression,
    pub terminal: Expression,
    pub impulse_map: Vec<Expression>,
    pub cost: Expression,
    /// Finite action set; each entry has dimension `action_dim`.
    pub actions: Vec<Vec<f64>>,
    pub action_dim: usize,
    /// Spatial box of interest (validator sampling, default solver grids).
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub constants: Constants,
}

pub type ValueQuery<'a> = &'a (dyn Fn(f64, &[f64]) -> Result<f64, String> + Sync);

impl ProblemSpec {
    pub fn from_sections(
        problem: &ProblemSection,
        actions: &ActionsSection,
    ) -> Result<ProblemSpec, ModelError> {
        let n = problem.state_dim;
        let d = problem.noise_dim;
        if n == 0 || d == 0 {
            return Err(ModelError::Config(
                "state_dim and noise_dim must be at least 1".to_string(),
            ));
        }
        if !(problem.horizon > 0.0) {
            return Err(ModelError::Config(format!(
                "horizon must be positive, got {}",
                problem.horizon
            )));
        }
        let action_points = expand_actions(actions)?;
        let action_dim = action_points[0].len();
        if action_points.iter().any(|b| b.len() != action_dim) {
            return Err(ModelError::Config(
                "all actions must have the same dimension".to_string(),
            ));
        }

        let parse_field = |text: &str, field: String, vars: VarSet| {
            expr::parse(text, vars).map_err(|source| ModelError::BadExpression { field, source })
        };

        if problem.drift.len() != n {
            return Err(ModelError::Config(format!(
                "drift must have {n} entries, got {}",
                problem.drift.len()
            )));
        }
        let mut drift = Vec::with_capacity(n);
        for (i, text) in problem.drift.iter().enumerate() {
            drift.push(parse_field(
                text,
                format!("[problem] drift[{i}]"),
                VarSet::coefficient(n),
            )?);
        }

        if problem.vol.len() != n || problem.vol.iter().any(|row| row.len() != d) {
            return Err(ModelError::Config(format!(
                "vol must be {n} rows of {d} entries"
            )));
        }
        let mut vol = Vec::with_capacity(n);
        for (i, row) in problem.vol.iter().enumerate() {
            let mut out = Vec::with_capacity(d);
            for (j, text) in row.iter().enumerate() {
                out.push(parse_field(
                    text,
                    format!("[problem] vol[{i}][{j}]"),
                    VarSet::coefficient(n),
                )?);
            }
            vol.push(out);
        }

        let driver = parse_field(
            &problem.driver,
            "[problem] driver".to_string(),
            VarSet::driver(n, d),
        )?;
        let terminal = parse_field(
            &problem.terminal,
            "[problem] terminal".to_string(),
            VarSet::terminal(n),
        )?;

        if problem.impulse.len() != n {
            return Err(ModelError::Config(format!(
                "impulse must have {n} entries, got {}",
                problem.impulse.len()
            )));
        }
        let mut impulse_map = Vec::with_capacity(n);
        for (i, text) in problem.impulse.iter().enumerate() {
            impulse_map.push(parse_field(
                text,
                format!("[problem] impulse[{i}]"),
                VarSet::impulse(n, action_dim),
            )?);
        }
        let cost = parse_field(
            &problem.cost,
            "[problem] cost".to_string(),
            VarSet::impulse(n, action_dim),
        )?;

        if problem.box_lo.len() != n || problem.box_hi.len() != n {
            return Err(ModelError::Config(format!(
                "box_lo/box_hi must each have {n} entries"
            )));
        }
        for i in 0..n {
            if !(problem.box_lo[i] < problem.box_hi[i]) {
                return Err(ModelError::Config(format!(
                    "box_lo[{i}] = {} must be below box_hi[{i}] = {}",
                    problem.box_lo[i], problem.box_hi[i]
                )));
            }
        }

        Ok(ProblemSpec {
            state_dim: n,
            noise_dim: d,
            horizon: problem.horizon,
            drift,
            vol,
            driver,
            terminal,
            impulse_map,
            cost,
            actions: action_points,
            action_dim,
            box_lo: problem.box_lo.clone(),
            box_hi: problem.box_hi.clone(),
            constants: Constants::from(&problem.constants),
        })
    }

    /// True when the driver references the value function (`V(...)`).
    pub fn is_nonlocal(&self) -> bool {
        self.driver.has_value_term()
    }

    pub fn driver_uses_z(&self) -> bool {
        self.driver.references_z()
    }

    pub fn driver_uses_y(&self) -> bool {
        self.driver.references(Var::Y)
    }

    pub fn drift_into(
        &self,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<(), expr::EvalError> {
        let ctx = EvalContext::coefficient(t, x);
        for (i, e) in self.drift.iter().enumerate() {
            out[i] = e.evaluate(&ctx)?;
        }
        Ok(())
    }

    /// Volatility matrix, row-major `n × d`.
    pub fn vol_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), expr::EvalError> {
        let ctx = EvalContext::coefficient(t, x);
        let d = self.noise_dim;
        for (i, row) in self.vol.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[i * d + j] = e.evaluate(&ctx)?;
            }
        }
        Ok(())
    }

    pub fn driver_value(
        &self,
        t: f64,
        x: &[f64],
        y: f64,
        z: &[f64],
        value_fn: Option<ValueQuery>,
    ) -> Result<f64, expr::EvalError> {
        let ctx = EvalContext {
            t: Some(t),
            state: Some(x),
            y: Some(y),
            z: Some(z),
            action: None,
            value_fn,
        };
        self.driver.evaluate(&ctx)
    }

    pub fn terminal_value(&self, x: &[f64]) -> Result<f64, expr::EvalError> {
        self.terminal.evaluate(&EvalContext::terminal(x))
    }

    pub fn impulse_into(
        &self,
        t: f64,
        x: &[f64],
        b: &[f64],
        out: &mut [f64],
    ) -> Result<(), expr::EvalError> {
        let ctx = EvalContext::impulse(t, x, b);
        for (i, e) in self.impulse_map.iter().enumerate() {
            out[i] = e.evaluate(&ctx)?;
        }
        Ok(())
    }

    pub fn cost_value(&self, t: f64, x: &[f64], b: &[f64]) -> Result<f64, expr::EvalError> {
        self.cost.evaluate(&EvalContext::impulse(t, x, b))
    }
}

fn expand_actions(actions: &ActionsSection) -> Result<Vec<Vec<f64>>, ModelError> {
    if !actions.list.is_empty() {
        if actions.list.iter().any(|b| b.is_empty()) {
            return Err(ModelError::Config("actions must be non-empty vectors".to_string()));
        }
        return Ok(actions.list.clone());
    }
    let m = actions.box_lo.len();
    if m == 0 || actions.box_hi.len() != m || actions.counts.len() != m {
        return Err(ModelError::Config(
            "actions need either a non-empty `list` or matching box_lo/box_hi/counts".to_string(),
        ));
    }
    if actions.counts.iter().any(|&c| c < 1) {
        return Err(ModelError::Config("action counts must be at least 1".to_string()));
    }
    // cartesian grid over the action box
    let mut points = vec![Vec::new()];
    for axis in 0..m {
        let (lo, hi, count) = (actions.box_lo[axis], actions.box_hi[axis], actions.counts[axis]);
        let mut next = Vec::with_capacity(points.len() * count);
        for base in &points {
            for k in 0..count {
                let frac = if count == 1 {
                    0.5
                } else {
                    k as f64 / (count - 1) as f64
                };
                let mut p = base.clone();
                p.push(lo + frac * (hi - lo));
                next.push(p);
            }
        }
        points = next;
    }
    Ok(points)
}

/// Parse a full config and return the problem description.
pub fn load_spec(text: &str) -> Result<ProblemSpec, ModelError> {
    let config = FileConfig::parse(text)?;
    ProblemSpec::from_sections(&config.problem, &config.actions)
}

// ─── validation ───

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckStatus::Pass => write!(f, "pass"),
            CheckStatus::Warn => write!(f, "warn"),
            CheckStatus::Fail => write!(f, "FAIL"),
        }
    }
}

/// A concrete sample point at which a check failed.
#[derive(Debug, Clone)]
pub struct Witness {
    pub t: Option<f64>,
    pub x: Vec<f64>,
    pub b: Option<Vec<f64>>,
    pub detail: String,
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(t) = self.t {
            write!(f, "t = {t:.6}, ")?;
        }
        write!(f, "x = [")?;
        for (i, v) in self.x.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        write!(f, "]")?;
        if let Some(b) = &self.b {
            write!(f, ", b = [")?;
            for (i, v) in b.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:.6}")?;
            }
            write!(f, "]")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub samples: usize,
    /// At most three witnesses are kept per check.
    pub witnesses: Vec<Witness>,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub n_samples: usize,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "validation: {} ({} samples, seed {})",
            if self.passed() { "pass" } else { "FAIL" },
            self.n_samples,
            self.seed
        )?;
        for check in &self.checks {
            writeln!(f, "  [{}] {}", check.status, check.name)?;
            for w in &check.witnesses {
                writeln!(f, "    witness: {w}")?;
            }
        }
        Ok(())
    }
}

const WITNESS_CAP: usize = 3;
const CHECK_SLACK: f64 = 1e-9;

struct CheckBuilder {
    name: &'static str,
    status: CheckStatus,
    samples: usize,
    witnesses: Vec<Witness>,
}

impl CheckBuilder {
    fn new(name: &'static str) -> Self {
        CheckBuilder {
            name,
            status: CheckStatus::Pass,
            samples: 0,
            witnesses: Vec::new(),
        }
    }

    fn record(&mut self, status: CheckStatus, witness: Witness) {
        if status == CheckStatus::Fail
            || (status == CheckStatus::Warn && self.status == CheckStatus::Pass)
        {
            if status == CheckStatus::Fail && self.status != CheckStatus::Fail {
                // failures supersede accumulated warnings
                self.witnesses.clear();
            }
            self.status = match (self.status, status) {
                (CheckStatus::Fail, _) => CheckStatus::Fail,
                (_, s) => s,
            };
        }
        if (status == CheckStatus::Fail) == (self.status == CheckStatus::Fail)
            && status != CheckStatus::Pass
            && self.witnesses.len() < WITNESS_CAP
        {
            self.witnesses.push(witness);
        }
    }

    fn fail(&mut self, witness: Witness) {
        self.record(CheckStatus::Fail, witness);
    }

    fn warn(&mut self, witness: Witness) {
        self.record(CheckStatus::Warn, witness);
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            status: self.status,
            samples: self.samples,
            witnesses: self.witnesses,
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Draw sample points and test every structural assumption, reporting
/// failures with witnesses instead of returning errors.
pub fn validate_spec(spec: &ProblemSpec, n_samples: usize, seed: u64) -> ValidationReport {
    let n = spec.state_dim;
    let d = spec.noise_dim;
    let cs = &spec.constants;
    let sample_x = |k: u64, tag: u64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                rng::uniform_in(
                    rng::derive(seed, tag),
                    k * n as u64 + i as u64,
                    spec.box_lo[i],
                    spec.box_hi[i],
                )
            })
            .collect()
    };
    let sample_t = |k: u64, tag: u64| -> f64 {
        rng::uniform_in(rng::derive(seed, tag), k, 0.0, spec.horizon)
    };
    let action_at = |k: u64| -> &[f64] {
        let idx = (rng::stream_u64(rng::derive(seed, 7), k) % spec.actions.len() as u64) as usize;
        &spec.actions[idx]
    };

    let mut cost_floor = CheckBuilder::new("cost_floor");
    let mut confinement = CheckBuilder::new("impulse_confinement");
    let mut terminal_gap = CheckBuilder::new("terminal_no_gain");
    let mut coeff_growth = CheckBuilder::new("coeff_growth");
    let mut coeff_lip = CheckBuilder::new("coeff_lipschitz");
    let mut driver_growth = CheckBuilder::new("driver_growth");
    let mut terminal_growth = CheckBuilder::new("terminal_growth");
    let mut driver_lip = CheckBuilder::new("driver_lipschitz");
    let mut nonlocal_conf = CheckBuilder::new("nonlocal_confinement");

    let mut gamma = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut sig = vec![0.0; n * d];
    let mut a2 = vec![0.0; n];
    let mut sig2 = vec![0.0; n * d];

    for k in 0..n_samples as u64 {
        let t = sample_t(k, 1);
        let x = sample_x(k, 2);
        let b = action_at(k);
        let witness = |detail: String| Witness {
            t: Some(t),
            x: x.clone(),
            b: Some(b.to_vec()),
            detail,
        };

        // intervention cost floor: ℓ(t,x,b) ≥ cost_floor
        cost_floor.samples += 1;
        match spec.cost_value(t, &x, b) {
            Ok(cost) => {
                if cost < cs.cost_floor - CHECK_SLACK {
                    cost_floor.fail(witness(format!(
                        "cost {cost:.6} is below the floor {}",
                        cs.cost_floor
                    )));
                }
            }
            Err(e) => cost_floor.fail(witness(format!("cost failed to evaluate: {e}"))),
        }

        // impulse confinement: |Γ(t,x,b)| ≤ max(confinement_radius, |x|)
        confinement.samples += 1;
        match spec.impulse_into(t, &x, b, &mut gamma) {
            Ok(()) => {
                let bound = cs.confinement_radius.max(norm2(&x));
                let reach = norm2(&gamma);
                if reach > bound + CHECK_SLACK {
                    confinement.fail(witness(format!(
                        "|impulse target| = {reach:.6} exceeds max(radius, |x|) = {bound:.6}"
                    )));
                }
            }
            Err(e) => confinement.fail(witness(format!("impulse map failed: {e}"))),
        }

        // no profitable intervention at the horizon:
        // terminal(x) > terminal(Γ(T,x,b)) − cost(T,x,b)
        terminal_gap.samples += 1;
        let t_end = spec.horizon;
        let gap = spec.impulse_into(t_end, &x, b, &mut gamma).and_then(|()| {
            let after = spec.terminal_value(&gamma)?;
            let here = spec.terminal_value(&x)?;
            let cost = spec.cost_value(t_end, &x, b)?;
            Ok(here - (after - cost))
        });
        match gap {
            Ok(gap) => {
                if gap <= CHECK_SLACK {
                    terminal_gap.fail(Witness {
                        t: Some(t_end),
                        x: x.clone(),
                        b: Some(b.to_vec()),
                        detail: format!(
                            "terminal reward gains {:.6} from a final intervention",
                            -gap
                        ),
                    });
                }
            }
            Err(e) => terminal_gap.fail(witness(format!("terminal comparison failed: {e}"))),
        }

        // linear growth of coefficients: |a| + |σ| ≤ coeff_growth · (1 + |x|)
        coeff_growth.samples += 1;
        let growth = spec
            .drift_into(t, &x, &mut a)
            .and_then(|()| spec.vol_into(t, &x, &mut sig));
        match growth {
            Ok(()) => {
                let total = norm2(&a) + norm2(&sig);
                let bound = cs.coeff_growth * (1.0 + norm2(&x));
                if total > bound + CHECK_SLACK * (1.0 + bound) {
                    coeff_growth.fail(witness(format!(
                        "|drift| + |vol| = {total:.6} exceeds {bound:.6}"
                    )));
                }

                // Lipschitz quotient against a second sample point
                coeff_lip.samples += 1;
                let x2 = sample_x(k, 3);
                let dx = norm2(
                    &x.iter()
                        .zip(&x2)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<f64>>(),
                );
                if dx > 1e-12 {
                    match spec
                        .drift_into(t, &x2, &mut a2)
                        .and_then(|()| spec.vol_into(t, &x2, &mut sig2))
                    {
                        Ok(()) => {
                            let da = norm2(
                                &a.iter().zip(&a2).map(|(u, v)| u - v).collect::<Vec<f64>>(),
                            );
                            let ds = norm2(
                                &sig
                                    .iter()
                                    .zip(&sig2)
                                    .map(|(u, v)| u - v)
                                    .collect::<Vec<f64>>(),
                            );
                            let quotient = (da + ds) / dx;
                            if quotient > cs.coeff_lipschitz + CHECK_SLACK * (1.0 + cs.coeff_lipschitz)
                            {
                                coeff_lip.fail(witness(format!(
                                    "Lipschitz quotient {quotient:.6} exceeds {} (against x' = {:?})",
                                    cs.coeff_lipschitz, x2
                                )));
                            }
                        }
                        Err(e) => coeff_lip.fail(witness(format!("coefficients failed: {e}"))),
                    }
                }
            }
            Err(e) => coeff_growth.fail(witness(format!("coefficients failed: {e}"))),
        }

        // driver growth at (y, z) = 0 with the value slot frozen at zero
        driver_growth.samples += 1;
        let zero_fn = |_: f64, _: &[f64]| -> Result<f64, String> { Ok(0.0) };
        let zeros = vec![0.0; d];
        match spec.driver_value(t, &x, 0.0, &zeros, Some(&zero_fn)) {
            Ok(f0) => {
                let bound = cs.driver_growth * (1.0 + norm2(&x).powf(cs.growth_power));
                if f0.abs() > bound + CHECK_SLACK * (1.0 + bound) {
                    driver_growth.fail(witness(format!(
                        "|driver(t,x,0,0)| = {:.6} exceeds {bound:.6}",
                        f0.abs()
                    )));
                }
            }
            Err(e) => driver_growth.fail(witness(format!("driver failed at (y,z) = 0: {e}"))),
        }

        // terminal growth
        terminal_growth.samples += 1;
        match spec.terminal_value(&x) {
            Ok(v) => {
                let bound = cs.terminal_growth * (1.0 + norm2(&x).powf(cs.growth_power));
                if v.abs() > bound + CHECK_SLACK * (1.0 + bound) {
                    terminal_growth.fail(witness(format!(
                        "|terminal| = {:.6} exceeds {bound:.6}",
                        v.abs()
                    )));
                }
            }
            Err(e) => terminal_growth.fail(witness(format!("terminal failed: {e}"))),
        }

        // driver Lipschitz in (y, z) and in the value slot
        driver_lip.samples += 1;
        let scale = 1.0 + norm2(&x).powf(cs.growth_power);
        let lip_seed = rng::derive(seed, 4);
        let y1 = rng::uniform_in(lip_seed, 6 * k, -scale, scale);
        let y2 = rng::uniform_in(lip_seed, 6 * k + 1, -scale, scale);
        let z1: Vec<f64> = (0..d)
            .map(|j| rng::uniform_in(lip_seed, 6 * k + 2 + j as u64, -scale, scale))
            .collect();
        let z2: Vec<f64> = (0..d)
            .map(|j| {
                rng::uniform_in(rng::derive(seed, 5), 6 * k + 2 + j as u64, -scale, scale)
            })
            .collect();
        let c1 = rng::uniform_in(lip_seed, 6 * k + 4, -scale, scale);
        let c2 = rng::uniform_in(lip_seed, 6 * k + 5, -scale, scale);
        let const_fn1 = move |_: f64, _: &[f64]| -> Result<f64, String> { Ok(c1) };
        let const_fn2 = move |_: f64, _: &[f64]| -> Result<f64, String> { Ok(c2) };
        let pair = spec
            .driver_value(t, &x, y1, &z1, Some(&const_fn1))
            .and_then(|f1| {
                spec.driver_value(t, &x, y2, &z2, Some(&const_fn2))
                    .map(|f2| (f1, f2))
            });
        match pair {
            Ok((f1, f2)) => {
                let dz = norm2(
                    &z1.iter().zip(&z2).map(|(u, v)| u - v).collect::<Vec<f64>>(),
                );
                let input_dist = (y1 - y2).abs() + dz + (c1 - c2).abs();
                if input_dist > 1e-12 {
                    let quotient = (f1 - f2).abs() / input_dist;
                    if quotient > cs.driver_lipschitz + CHECK_SLACK * (1.0 + cs.driver_lipschitz) {
                        driver_lip.fail(witness(format!(
                            "driver Lipschitz quotient {quotient:.6} exceeds {}",
                            cs.driver_lipschitz
                        )));
                    }
                }
            }
            Err(e) => driver_lip.fail(witness(format!("driver failed: {e}"))),
        }

        // where does the driver evaluate the value function? (flag only)
        if spec.is_nonlocal() {
            nonlocal_conf.samples += 1;
            let recorded: Mutex<Vec<Vec<f64>>> = Mutex::new(Vec::new());
            let recording_fn = |_: f64, p: &[f64]| -> Result<f64, String> {
                recorded.lock().unwrap().push(p.to_vec());
                Ok(0.0)
            };
            if spec
                .driver_value(t, &x, 0.0, &zeros, Some(&recording_fn))
                .is_ok()
            {
                let bound = cs.confinement_radius.max(norm2(&x));
                for p in recorded.lock().unwrap().iter() {
                    if norm2(p) > bound + CHECK_SLACK {
                        nonlocal_conf.warn(witness(format!(
                            "value term evaluated at |p| = {:.6} outside max(radius, |x|) = {bound:.6}",
                            norm2(p)
                        )));
                    }
                }
            }
        }
    }

    ValidationReport {
        n_samples,
        seed,
        checks: vec![
            cost_floor.finish(),
            confinement.finish(),
            terminal_gap.finish(),
            coeff_growth.finish(),
            coeff_lip.finish(),
            driver_growth.finish(),
            terminal_growth.finish(),
            driver_lip.finish(),
            nonlocal_conf.finish(),
        ],
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const PUT_CATALOG: &str = r#"
[problem]
state_dim = 1
noise_dim = 1
horizon = 1.0
drift = ["0.05*x1"]
vol = [["0.2*x1"]]
driver = "-0.05*y"
terminal = "max(1 - x1, 0)"
impulse = ["min(max(x1, -1), 1)"]
cost = "0.1"
box_lo = [-1.5]
box_hi = [3.5]

[problem.constants]
confinement_radius = 1.0
cost_floor = 0.1
driver_lipschitz = 0.05
growth_power = 2.0
driver_growth = 0.1
terminal_growth = 3.0
coeff_growth = 0.25
coeff_lipschitz = 0.25

[actions]
list = [[0.0]]
"#;

    #[test]
    fn load_spec_reads_the_catalog_problem() {
        let spec = load_spec(PUT_CATALOG).expect("load");
        assert_eq!(spec.state_dim, 1);
        assert_eq!(spec.noise_dim, 1);
        assert_eq!(spec.horizon, 1.0);
        assert_eq!(spec.actions, vec![vec![0.0]]);
        assert!(!spec.is_nonlocal());
        assert!(spec.driver_uses_y());
        assert!(!spec.driver_uses_z());
        let mut out = [0.0];
        spec.drift_into(0.0, &[2.0], &mut out).unwrap();
        assert_eq!(out[0], 0.1);
        assert_eq!(spec.terminal_value(&[0.25]).unwrap(), 0.75);
        // impulse map clamps into [-1, 1] whatever the action says
        spec.impulse_into(0.0, &[3.0], &[0.0], &mut out).unwrap();
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn catalog_problem_validates_clean() {
        let spec = load_spec(PUT_CATALOG).expect("load");
        let report = validate_spec(&spec, 400, 11);
        assert!(report.passed(), "unexpected failures:\n{report}");
    }

    #[test]
    fn action_box_is_expanded_to_a_grid() {
        let actions = ActionsSection {
            list: Vec::new(),
            box_lo: vec![-1.0, 0.0],
            box_hi: vec![1.0, 2.0],
            counts: vec![3, 2],
        };
        let points = expand_actions(&actions).expect("expand");
        assert_eq!(points.len(), 6);
        assert_eq!(points[0], vec![-1.0, 0.0]);
        assert_eq!(points[5], vec![1.0, 2.0]);
    }

    #[test]
    fn cost_below_floor_is_rejected_with_witness() {
        let text = PUT_CATALOG.replace("cost = \"0.1\"", "cost = \"0.05 * (1 + t)\"");
        let spec = load_spec(&text).expect("load");
        let report = validate_spec(&spec, 400, 11);
        assert!(!report.passed());
        let check = report.check("cost_floor").unwrap();
        assert_eq!(check.status, CheckStatus::Fail);
        let w = check.witnesses.first().expect("witness");
        // the witnessed point must actually violate the bound
        let cost = spec.cost_value(w.t.unwrap(), &w.x, w.b.as_ref().unwrap()).unwrap();
        assert!(cost < 0.1, "witness does not violate: cost = {cost}");
    }

    #[test]
    fn unbounded_impulse_map_is_rejected_with_witness() {
        let text = PUT_CATALOG
            .replace("impulse = [\"min(max(x1, -1), 1)\"]", "impulse = [\"x1 + 2\"]");
        let spec = load_spec(&text).expect("load");
        let report = validate_spec(&spec, 400, 11);
        let check = report.check("impulse_confinement").unwrap();
        assert_eq!(check.status, CheckStatus::Fail);
        let w = check.witnesses.first().expect("witness");
        let mut target = [0.0];
        spec.impulse_into(w.t.unwrap(), &w.x, w.b.as_ref().unwrap(), &mut target)
            .unwrap();
        assert!(target[0].abs() > w.x[0].abs().max(1.0));
    }

    #[test]
    fn profitable_terminal_intervention_is_rejected() {
        // resetting to 0 yields terminal reward 1 at cost 0.1: a free lunch at T
        let text = PUT_CATALOG
            .replace("impulse = [\"min(max(x1, -1), 1)\"]", "impulse = [\"0 * b1\"]");
        let spec = load_spec(&text).expect("load");
        let report = validate_spec(&spec, 400, 11);
        let check = report.check("terminal_no_gain").unwrap();
        assert_eq!(check.status, CheckStatus::Fail, "report:\n{report}");
        assert!(!check.witnesses.is_empty());
    }

    #[test]
    fn coefficient_growth_violation_is_caught() {
        let text = PUT_CATALOG.replace("vol = [[\"0.2*x1\"]]", "vol = [[\"x1^2\"]]");
        let spec = load_spec(&text).expect("load");
        let report = validate_spec(&spec, 400, 11);
        assert_eq!(
            report.check("coeff_growth").unwrap().status,
            CheckStatus::Fail
        );
        assert_eq!(
            report.check("coeff_lipschitz").unwrap().status,
            CheckStatus::Fail
        );
    }

    #[test]
    fn validation_is_deterministic_given_seed() {
        let spec = load_spec(PUT_CATALOG).expect("load");
        let a = validate_spec(&spec, 200, 5);
        let b = validate_spec(&spec, 200, 5);
        assert_eq!(format!("{a}"), format!("{b}"));
    }

    #[test]
    fn structural_errors_are_loud() {
        assert!(matches!(
            load_spec("not toml at all ["),
            Err(ModelError::Toml(_))
        ));
        let text = PUT_CATALOG.replace("drift = [\"0.05*x1\"]", "drift = [\"0.05*x2\"]");
        match load_spec(&text) {
            Err(ModelError::BadExpression { field, .. }) => {
                assert!(field.contains("drift"), "field was {field}")
            }
            other => panic!("expected parse failure, got {other:?}"),
        }
        let text = PUT_CATALOG.replace("horizon = 1.0", "horizon = 0.0");
        assert!(matches!(load_spec(&text), Err(ModelError::Config(_))));
    }
}
