//! Backward solvers on path ensembles: the plain BSDE scheme, the reflected
//! scheme (obstacle via pointwise maximum with an exact discrete Skorokhod
//! condition), and the controlled-payoff scheme that subtracts realized
//! intervention costs.
//!
//! Conditional expectations are estimated by least-squares regression on a
//! declared basis (global polynomials or bins), with a bin-means fallback
//! when the normal equations are ill-conditioned. A tabular provider pools
//! paths with identical quantized states instead, which is exact on lattice
//! ensembles and lets tests separate scheme error from regression error.
//!
//! Determinism: every cross-path accumulation (normal equations, bin sums,
//! means) runs in path-index order; per-path transforms carry no shared
//! state. Results are bitwise reproducible for a fixed seed regardless of
//! thread count.

use crate::expr;
use crate::impulse::SpatialGrid;
use crate::model::{ProblemSpec, ValueQuery};
use crate::sde::{ControlledPaths, PathEnsemble, TimeGrid};
use crate::impulse::ValueFunction;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum RbsdeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration rejected: {0}")]
    Config(String),
    #[error("expression evaluation failed: {0}")]
    Eval(String),
    #[error("obstacle evaluation failed: {0}")]
    Obstacle(String),
    #[error(
        "terminal compatibility violated on path {path}: obstacle {obstacle} > terminal {terminal} at x = {x:?}"
    )]
    TerminalCompatibility {
        path: usize,
        x: Vec<f64>,
        obstacle: f64,
        terminal: f64,
    },
    #[error("regression failed: {0}")]
    Regression(String),
}

impl From<expr::EvalError> for RbsdeError {
    fn from(e: expr::EvalError) -> Self {
        RbsdeError::Eval(e.to_string())
    }
}

/// Scalar field of (t, x) usable from worker threads (obstacles).
pub type StateFn<'a> = &'a (dyn Fn(f64, &[f64]) -> Result<f64, String> + Sync);

// ─── regression basis ───

/// A finite feature family for cross-sectional regression.
#[derive(Debug, Clone)]
pub struct RegressionBasis {
    kind: BasisKind,
}

#[derive(Debug, Clone)]
enum BasisKind {
    /// Monomials of total degree ≤ `degree`. The spanned function space is
    /// affine-invariant, so each fit standardizes coordinates by the sample
    /// mean and spread of its own cross-section; this keeps the normal
    /// equations well-conditioned even when paths have barely dispersed.
    Poly { exponents: Vec<Vec<usize>> },
    /// Piecewise-constant on a uniform partition of the declared box.
    Bins {
        per_axis: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

fn push_compositions(total: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if slots == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in 0..=total {
        prefix.push(first);
        push_compositions(total - first, slots - 1, prefix, out);
        prefix.pop();
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: usize, dim: usize) -> Result<RegressionBasis, RbsdeError> {
        if dim == 0 {
            return Err(RbsdeError::Shape("basis needs at least one variable".to_string()));
        }
        let mut exponents = Vec::new();
        let mut prefix = Vec::new();
        for total in 0..=degree {
            push_compositions(total, dim, &mut prefix, &mut exponents);
        }
        Ok(RegressionBasis {
            kind: BasisKind::Poly { exponents },
        })
    }

    pub fn bins(per_axis: usize, lo: &[f64], hi: &[f64]) -> Result<RegressionBasis, RbsdeError> {
        if per_axis == 0 {
            return Err(RbsdeError::Shape("need at least one bin per axis".to_string()));
        }
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
            return Err(RbsdeError::Shape("basis box must have lo < hi".to_string()));
        }
        Ok(RegressionBasis {
            kind: BasisKind::Bins {
                per_axis,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
        })
    }

    pub fn size(&self) -> usize {
        match &self.kind {
            BasisKind::Poly { exponents, .. } => exponents.len(),
            BasisKind::Bins { per_axis, lo, .. } => per_axis.pow(lo.len() as u32),
        }
    }
}

fn poly_features_into(
    exponents: &[Vec<usize>],
    center: &[f64],
    scale: &[f64],
    x: &[f64],
    out: &mut [f64],
) {
    for (slot, exps) in exponents.iter().enumerate() {
        let mut acc = 1.0;
        for (i, &e) in exps.iter().enumerate() {
            if e > 0 {
                let u = (x[i] - center[i]) / scale[i];
                acc *= u.powi(e as i32);
            }
        }
        out[slot] = acc;
    }
}

// ─── conditional-expectation providers ───

/// How conditional expectations given the current state are estimated.
#[derive(Debug, Clone)]
pub enum CondExpProvider {
    /// Least-squares regression on the basis, with a bin-means fallback on
    /// ill-conditioned steps.
    Basis(RegressionBasis),
    /// Exact conditional expectations by pooling paths whose states agree
    /// after quantization to multiples of `unit` (lattice ensembles).
    Tabular { unit: f64 },
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub provider: CondExpProvider,
    /// Condition-number threshold on the normal equations beyond which the
    /// step falls back to bin means.
    pub condition_limit: f64,
    /// Bins per axis used by the conditioning fallback.
    pub fallback_bins: usize,
    /// Re-evaluate the driver once with the updated y before committing the
    /// step (one fixed-point sub-iteration).
    pub picard_refine: bool,
}

impl SolveOptions {
    pub fn new(provider: CondExpProvider) -> SolveOptions {
        SolveOptions {
            provider,
            condition_limit: 1e10,
            fallback_bins: 16,
            picard_refine: false,
        }
    }

    /// Polynomial regression of the given total degree in the state
    /// variables.
    pub fn polynomial(spec: &ProblemSpec, degree: usize) -> Result<SolveOptions, RbsdeError> {
        Ok(SolveOptions::new(CondExpProvider::Basis(
            RegressionBasis::polynomial(degree, spec.state_dim)?,
        )))
    }

    pub fn binned(spec: &ProblemSpec, per_axis: usize) -> Result<SolveOptions, RbsdeError> {
        Ok(SolveOptions::new(CondExpProvider::Basis(RegressionBasis::bins(
            per_axis,
            &spec.box_lo,
            &spec.box_hi,
        )?)))
    }

    pub fn tabular(unit: f64) -> SolveOptions {
        SolveOptions::new(CondExpProvider::Tabular { unit })
    }
}

/// One fitted cross-sectional conditional expectation E[target | X_k = ·].
enum FittedStep<'b> {
    /// All states coincide: the plain mean is the exact estimator.
    Mean { value: f64, se: f64 },
    Poly {
        exponents: &'b [Vec<usize>],
        center: Vec<f64>,
        scale: Vec<f64>,
        coeffs: DVector<f64>,
        xtx_inv: DMatrix<f64>,
        sigma2: f64,
    },
    Bins {
        lo: Vec<f64>,
        hi: Vec<f64>,
        per_axis: usize,
        dim: usize,
        means: Vec<f64>,
        counts: Vec<usize>,
        vars: Vec<f64>,
        global_mean: f64,
        global_var: f64,
    },
    Table {
        unit: f64,
        origin: Vec<f64>,
        cells: HashMap<Vec<i64>, f64>,
        global_mean: f64,
    },
}

impl FittedStep<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            FittedStep::Mean { value, .. } => *value,
            FittedStep::Poly {
                exponents,
                center,
                scale,
                coeffs,
                ..
            } => {
                let mut phi = vec![0.0; coeffs.len()];
                poly_features_into(exponents, center, scale, x, &mut phi);
                phi.iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum()
            }
            FittedStep::Bins {
                lo,
                hi,
                per_axis,
                dim,
                means,
                counts,
                global_mean,
                ..
            } => {
                let cell = bin_cell(x, lo, hi, *per_axis, *dim);
                if counts[cell] > 0 {
                    means[cell]
                } else {
                    *global_mean
                }
            }
            FittedStep::Table {
                unit,
                origin,
                cells,
                global_mean,
            } => {
                let key = table_key(x, origin, *unit);
                cells.get(&key).copied().unwrap_or(*global_mean)
            }
        }
    }

    fn se(&self, x: &[f64]) -> f64 {
        match self {
            FittedStep::Mean { se, .. } => *se,
            FittedStep::Poly {
                exponents,
                center,
                scale,
                coeffs,
                xtx_inv,
                sigma2,
            } => {
                let mut phi = vec![0.0; coeffs.len()];
                poly_features_into(exponents, center, scale, x, &mut phi);
                let phi = DVector::from_vec(phi);
                let quad = (xtx_inv * &phi).dot(&phi);
                (sigma2 * quad.max(0.0)).sqrt()
            }
            FittedStep::Bins {
                lo,
                hi,
                per_axis,
                dim,
                counts,
                vars,
                global_var,
                ..
            } => {
                let cell = bin_cell(x, lo, hi, *per_axis, *dim);
                if counts[cell] > 1 {
                    (vars[cell] / counts[cell] as f64).sqrt()
                } else {
                    global_var.sqrt()
                }
            }
            FittedStep::Table { .. } => 0.0,
        }
    }
}

fn bin_cell(x: &[f64], lo: &[f64], hi: &[f64], per_axis: usize, dim: usize) -> usize {
    let mut cell = 0;
    for i in 0..dim {
        let width = hi[i] - lo[i];
        let idx = if width > 0.0 {
            (((x[i] - lo[i]) / width * per_axis as f64).floor() as isize)
                .clamp(0, per_axis as isize - 1) as usize
        } else {
            0
        };
        cell = cell * per_axis + idx;
    }
    cell
}

fn table_key(x: &[f64], origin: &[f64], unit: f64) -> Vec<i64> {
    x.iter()
        .zip(origin)
        .map(|(v, o)| ((v - o) / unit).round() as i64)
        .collect()
}

fn mean_and_var(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

/// Fit one conditional expectation; the flag reports a conditioning
/// fallback from the declared basis to bin means.
fn fit_step<'b>(
    provider: &'b CondExpProvider,
    condition_limit: f64,
    fallback_bins: usize,
    states: &[f64],
    dim: usize,
    targets: &[f64],
) -> Result<(FittedStep<'b>, bool), RbsdeError> {
    let n = targets.len();
    // degenerate cross-section: every path at the same point
    let mut degenerate = true;
    'outer: for i in 0..dim {
        let first = states[i];
        for p in 1..n {
            if (states[p * dim + i] - first).abs() > 1e-13 {
                degenerate = false;
                break 'outer;
            }
        }
    }
    if degenerate {
        let (mean, var) = mean_and_var(targets.iter().copied(), n);
        return Ok((
            FittedStep::Mean {
                value: mean,
                se: (var / n as f64).sqrt(),
            },
            false,
        ));
    }

    match provider {
        CondExpProvider::Tabular { unit } => {
            if !(unit.is_finite() && *unit > 0.0) {
                return Err(RbsdeError::Config(format!(
                    "tabular quantization unit must be positive, got {unit}"
                )));
            }
            let origin = states[..dim].to_vec();
            let mut sums: HashMap<Vec<i64>, (f64, usize)> = HashMap::new();
            for p in 0..n {
                let key = table_key(&states[p * dim..(p + 1) * dim], &origin, *unit);
                let entry = sums.entry(key).or_insert((0.0, 0));
                entry.0 += targets[p];
                entry.1 += 1;
            }
            let cells = sums
                .into_iter()
                .map(|(k, (s, c))| (k, s / c as f64))
                .collect();
            let global_mean = targets.iter().sum::<f64>() / n as f64;
            Ok((
                FittedStep::Table {
                    unit: *unit,
                    origin,
                    cells,
                    global_mean,
                },
                false,
            ))
        }
        CondExpProvider::Basis(basis) => match &basis.kind {
            BasisKind::Bins { per_axis, lo, hi } => {
                Ok((fit_bins(states, dim, targets, *per_axis, lo, hi), false))
            }
            BasisKind::Poly { exponents } => {
                if let Some(fit) = fit_poly(exponents, states, dim, targets, condition_limit) {
                    Ok((fit, false))
                } else {
                    // sample-adaptive bins keep the step well-posed
                    let (lo, hi) = sample_box(states, dim, n);
                    Ok((fit_bins(states, dim, targets, fallback_bins, &lo, &hi), true))
                }
            }
        },
    }
}

fn sample_box(states: &[f64], dim: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in 0..n {
        for i in 0..dim {
            lo[i] = lo[i].min(states[p * dim + i]);
            hi[i] = hi[i].max(states[p * dim + i]);
        }
    }
    (lo, hi)
}

fn fit_bins(
    states: &[f64],
    dim: usize,
    targets: &[f64],
    per_axis: usize,
    lo: &[f64],
    hi: &[f64],
) -> FittedStep<'static> {
    let n = targets.len();
    let n_cells = per_axis.pow(dim as u32);
    let mut sums = vec![0.0; n_cells];
    let mut counts = vec![0usize; n_cells];
    for p in 0..n {
        let cell = bin_cell(&states[p * dim..(p + 1) * dim], lo, hi, per_axis, dim);
        sums[cell] += targets[p];
        counts[cell] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut vars = vec![0.0; n_cells];
    for p in 0..n {
        let cell = bin_cell(&states[p * dim..(p + 1) * dim], lo, hi, per_axis, dim);
        let r = targets[p] - means[cell];
        vars[cell] += r * r;
    }
    for (v, &c) in vars.iter_mut().zip(&counts) {
        if c > 1 {
            *v /= (c - 1) as f64;
        } else {
            *v = 0.0;
        }
    }
    let (global_mean, global_var) = mean_and_var(targets.iter().copied(), n);
    FittedStep::Bins {
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        per_axis,
        dim,
        means,
        counts,
        vars,
        global_mean,
        global_var,
    }
}

fn fit_poly<'b>(
    exponents: &'b [Vec<usize>],
    states: &[f64],
    dim: usize,
    targets: &[f64],
    condition_limit: f64,
) -> Option<FittedStep<'b>> {
    let m = exponents.len();
    let n = targets.len();
    // standardize each coordinate by the cross-section's mean and spread
    let mut center = vec![0.0; dim];
    let mut scale = vec![0.0; dim];
    for i in 0..dim {
        let (mean, var) = mean_and_var((0..n).map(|p| states[p * dim + i]), n);
        center[i] = mean;
        scale[i] = if var.sqrt() > 1e-300 { var.sqrt() } else { 1.0 };
    }
    let mut xtx = DMatrix::<f64>::zeros(m, m);
    let mut xty = DVector::<f64>::zeros(m);
    let mut phi = vec![0.0; m];
    for p in 0..n {
        poly_features_into(exponents, &center, &scale, &states[p * dim..(p + 1) * dim], &mut phi);
        for i in 0..m {
            xty[i] += phi[i] * targets[p];
            for j in i..m {
                xtx[(i, j)] += phi[i] * phi[j];
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
    }
    let svd = xtx.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax.is_finite() && smin > 0.0 && smax / smin <= condition_limit) {
        return None;
    }
    let coeffs = svd.solve(&xty, 0.0).ok()?;
    let xtx_inv = svd.pseudo_inverse(0.0).ok()?;
    let mut rss = 0.0;
    for p in 0..n {
        poly_features_into(exponents, &center, &scale, &states[p * dim..(p + 1) * dim], &mut phi);
        let fitted: f64 = phi.iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum();
        let r = targets[p] - fitted;
        rss += r * r;
    }
    let dof = n.saturating_sub(m).max(1);
    Some(FittedStep::Poly {
        exponents,
        center,
        scale,
        coeffs,
        xtx_inv,
        sigma2: rss / dof as f64,
    })
}

// ─── solutions ───

/// Per-grid-node value surface produced alongside a solve (values and
/// regression standard errors at every (time slice, grid node)).
#[derive(Debug, Clone)]
pub struct Surface {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Output of a backward solve: per-path trajectories of Y, Z and the
/// cumulative reflection push K, plus the point estimate at the initial
/// time.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeGrid,
    n_paths: usize,
    noise_dim: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    k: Vec<f64>,
    /// Mean of Y at the initial time.
    pub value: f64,
    /// Monte Carlo standard error of `value`.
    pub stderr: f64,
    /// Number of backward steps that needed the conditioning fallback.
    pub conditioning_fallbacks: usize,
    /// Value surface on the requested grid, when one was requested.
    pub surface: Option<Surface>,
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[path * (self.grid.n_steps() + 1) + step]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let d = self.noise_dim;
        let stride = self.grid.n_steps() * d;
        &self.z[path * stride + step * d..path * stride + step * d + d]
    }

    /// Cumulative reflection push: K at node `step` sums the pushes applied
    /// strictly before it, so K at the initial node is zero.
    pub fn k_cum(&self, path: usize, step: usize) -> f64 {
        self.k[path * (self.grid.n_steps() + 1) + step]
    }

    pub fn y_raw(&self) -> &[f64] {
        &self.y
    }

    pub fn k_raw(&self) -> &[f64] {
        &self.k
    }
}

enum Mode<'a> {
    Plain,
    Reflected { obstacle: StateFn<'a> },
    Controlled { xi: &'a [f64] },
}

// ─── entry points ───

/// Solve the plain (unreflected) backward equation on an ensemble.
pub fn solve_bsde(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    frozen_value: Option<&ValueFunction>,
    options: &SolveOptions,
    surface_grid: Option<&SpatialGrid>,
) -> Result<BsdeSolution, RbsdeError> {
    solve_core(spec, ensemble, Mode::Plain, frozen_value, options, surface_grid)
}

/// Solve the reflected backward equation: per step the value is floored at
/// the obstacle and the push is recorded in K. Requires the obstacle to sit
/// at or below the terminal reward on the sampled terminal states.
pub fn solve_reflected(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    obstacle: StateFn<'_>,
    frozen_value: Option<&ValueFunction>,
    options: &SolveOptions,
    surface_grid: Option<&SpatialGrid>,
) -> Result<BsdeSolution, RbsdeError> {
    solve_core(
        spec,
        ensemble,
        Mode::Reflected { obstacle },
        frozen_value,
        options,
        surface_grid,
    )
}

/// Evaluate the payoff of a realized impulse control: the plain backward
/// recursion with the per-step intervention cost subtracted.
pub fn evaluate_impulse_value(
    spec: &ProblemSpec,
    controlled: &ControlledPaths,
    frozen_value: Option<&ValueFunction>,
    options: &SolveOptions,
) -> Result<BsdeSolution, RbsdeError> {
    solve_core(
        spec,
        &controlled.paths,
        Mode::Controlled {
            xi: controlled.xi_raw(),
        },
        frozen_value,
        options,
        None,
    )
}

fn solve_core(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    mode: Mode<'_>,
    frozen_value: Option<&ValueFunction>,
    options: &SolveOptions,
    surface_grid: Option<&SpatialGrid>,
) -> Result<BsdeSolution, RbsdeError> {
    let n = spec.state_dim;
    let d = spec.noise_dim;
    if ensemble.state_dim() != n || ensemble.noise_dim() != d {
        return Err(RbsdeError::Shape(
            "ensemble dimensions do not match the problem".to_string(),
        ));
    }
    if spec.is_nonlocal() && frozen_value.is_none() {
        return Err(RbsdeError::Config(
            "the driver references V(...): a frozen value function is required".to_string(),
        ));
    }
    if matches!(mode, Mode::Controlled { .. }) && surface_grid.is_some() {
        return Err(RbsdeError::Config(
            "value surfaces are not defined for realized-control payoffs".to_string(),
        ));
    }
    if let Some(g) = surface_grid {
        if g.dim() != n {
            return Err(RbsdeError::Shape(format!(
                "surface grid dimension {} does not match state dimension {n}",
                g.dim()
            )));
        }
    }

    let grid = ensemble.grid().clone();
    let n_steps = grid.n_steps();
    let n_states = n_steps + 1;
    let n_paths = ensemble.n_paths();
    let dt = grid.dt();

    let value_closure = frozen_value
        .map(|vf| move |t: f64, p: &[f64]| -> Result<f64, String> { Ok(vf.eval(t, p)) });
    let value_query: Option<ValueQuery> = value_closure
        .as_ref()
        .map(|c| c as &(dyn Fn(f64, &[f64]) -> Result<f64, String> + Sync));

    let mut y = vec![0.0; n_paths * n_states];
    let mut z = vec![0.0; n_paths * n_steps * d];
    let mut dk = vec![0.0; n_paths * n_steps];

    // terminal condition, and compatibility when reflecting
    for p in 0..n_paths {
        let x = ensemble.state(p, n_steps);
        let psi = spec.terminal_value(x)?;
        if !psi.is_finite() {
            return Err(RbsdeError::Eval(format!(
                "terminal reward is not finite at x = {x:?}"
            )));
        }
        y[p * n_states + n_steps] = psi;
        if let Mode::Reflected { obstacle } = &mode {
            let h = obstacle(grid.t_end(), x).map_err(RbsdeError::Obstacle)?;
            if h > psi + 1e-9 {
                return Err(RbsdeError::TerminalCompatibility {
                    path: p,
                    x: x.to_vec(),
                    obstacle: h,
                    terminal: psi,
                });
            }
        }
    }

    // surface storage, terminal slice pinned to the terminal reward exactly
    let mut surface = match surface_grid {
        Some(g) => {
            let m = g.n_nodes();
            let mut values = vec![0.0; n_states * m];
            let stderr = vec![0.0; n_states * m];
            for node in 0..m {
                values[n_steps * m + node] = spec.terminal_value(&g.node(node))?;
            }
            Some(Surface { values, stderr })
        }
        None => None,
    };

    let mut states = vec![0.0; n_paths * n];
    let mut targets = vec![0.0; n_paths];
    let mut z_targets = vec![0.0; n_paths];
    let mut y_new = vec![0.0; n_paths];
    let mut dk_new = vec![0.0; n_paths];
    let mut z_new = vec![0.0; n_paths * d];
    // Regression targets are realized continuation values carried per path,
    // not the previous step's fitted curve: the fit only steers driver
    // evaluation and reflection decisions, so a step's approximation error
    // does not re-enter later targets and compound across the horizon.  On
    // reflection the realized value restarts from the obstacle, mirroring
    // the pathwise resolution of the minimal push.
    let mut realized_path: Vec<f64> = (0..n_paths)
        .map(|p| y[p * n_states + n_steps])
        .collect();
    let mut conditioning_fallbacks = 0usize;

    for k in (0..n_steps).rev() {
        let t = grid.time(k);
        for p in 0..n_paths {
            states[p * n..(p + 1) * n].copy_from_slice(ensemble.state(p, k));
            targets[p] = realized_path[p];
        }
        let (fit_y, fell) = fit_step(
            &options.provider,
            options.condition_limit,
            options.fallback_bins,
            &states,
            n,
            &targets,
        )?;
        if fell {
            conditioning_fallbacks += 1;
        }

        let mut fit_z: Vec<FittedStep> = Vec::with_capacity(d);
        for j in 0..d {
            for p in 0..n_paths {
                z_targets[p] = targets[p] * ensemble.increment(p, k)[j];
            }
            let (fit, fell) = fit_step(
                &options.provider,
                options.condition_limit,
                options.fallback_bins,
                &states,
                n,
                &z_targets,
            )?;
            if fell {
                conditioning_fallbacks += 1;
            }
            fit_z.push(fit);
        }

        // per-path transform: continuation + driver, then the mode's
        // adjustment (reflection push or realized cost subtraction)
        let mode_ref = &mode;
        let fit_y_ref = &fit_y;
        let fit_z_ref = &fit_z;
        let picard = options.picard_refine;
        y_new
            .par_iter_mut()
            .zip(dk_new.par_iter_mut())
            .zip(z_new.par_chunks_mut(d))
            .zip(realized_path.par_iter_mut())
            .enumerate()
            .try_for_each(|(p, (((yv, dkv), zv), rv))| -> Result<(), RbsdeError> {
                let x = ensemble.state(p, k);
                let y_hat = fit_y_ref.eval(x);
                for j in 0..d {
                    zv[j] = fit_z_ref[j].eval(x) / dt;
                }
                let mut f = spec.driver_value(t, x, y_hat, zv, value_query)?;
                if picard {
                    let y_once = y_hat + f * dt;
                    f = spec.driver_value(t, x, y_once, zv, value_query)?;
                }
                let cont = y_hat + f * dt;
                match mode_ref {
                    Mode::Plain => {
                        *yv = cont;
                        *dkv = 0.0;
                        *rv += f * dt;
                    }
                    Mode::Reflected { obstacle } => {
                        let h = obstacle(t, x).map_err(RbsdeError::Obstacle)?;
                        let floored = cont.max(h);
                        *yv = floored;
                        *dkv = floored - cont;
                        if h > cont {
                            *rv = h;
                        } else {
                            *rv += f * dt;
                        }
                    }
                    Mode::Controlled { xi } => {
                        let d_xi = xi[p * n_states + k + 1] - xi[p * n_states + k];
                        *yv = cont - d_xi;
                        *dkv = 0.0;
                        *rv += f * dt - d_xi;
                    }
                }
                if !yv.is_finite() || !rv.is_finite() {
                    return Err(RbsdeError::Eval(format!(
                        "backward value became non-finite on path {p} at step {k}"
                    )));
                }
                Ok(())
            })?;

        for p in 0..n_paths {
            y[p * n_states + k] = y_new[p];
            dk[p * n_steps + k] = dk_new[p];
            z[p * n_steps * d + k * d..p * n_steps * d + (k + 1) * d]
                .copy_from_slice(&z_new[p * d..(p + 1) * d]);
        }

        if let (Some(surf), Some(g)) = (surface.as_mut(), surface_grid) {
            let m = g.n_nodes();
            let mut node_x = vec![0.0; n];
            let mut node_z = vec![0.0; d];
            for node in 0..m {
                g.node_into(node, &mut node_x);
                let y_hat = fit_y.eval(&node_x);
                for j in 0..d {
                    node_z[j] = fit_z[j].eval(&node_x) / dt;
                }
                let mut f = spec.driver_value(t, &node_x, y_hat, &node_z, value_query)?;
                if picard {
                    let y_once = y_hat + f * dt;
                    f = spec.driver_value(t, &node_x, y_once, &node_z, value_query)?;
                }
                let mut v = y_hat + f * dt;
                if let Mode::Reflected { obstacle } = &mode {
                    let h = obstacle(t, &node_x).map_err(RbsdeError::Obstacle)?;
                    v = v.max(h);
                }
                surf.values[k * m + node] = v;
                surf.stderr[k * m + node] = fit_y.se(&node_x);
            }
        }
    }

    // cumulative K, zero at the initial node
    let mut k_cum = vec![0.0; n_paths * n_states];
    for p in 0..n_paths {
        for step in 0..n_steps {
            k_cum[p * n_states + step + 1] = k_cum[p * n_states + step] + dk[p * n_steps + step];
        }
    }

    // Every fit preserves the cross-sectional mean, so the mean of the
    // fitted initial slice agrees with the mean realized value; the spread
    // of the realized values is the honest sampling error of the estimate.
    let value = y.iter().step_by(n_states).sum::<f64>() / n_paths as f64;
    let (_, var0) = mean_and_var(realized_path.iter().copied(), n_paths);
    let stderr = (var0 / n_paths as f64).sqrt();

    Ok(BsdeSolution {
        grid,
        n_paths,
        noise_dim: d,
        y,
        z,
        k: k_cum,
        value,
        stderr,
        conditioning_fallbacks,
        surface,
    })
}
