//! The intervention operator, obstacle construction, and feedback strategies.
//!
//! `intervention_op` is the best immediate-impulse value
//! `Mv(t,x) = max_b { v(t, Γ(t,x,b)) − ℓ(t,x,b) }` over the finite action
//! set. `obstacle_from` packages it as the reflection obstacle for the
//! backward solvers, and `optimal_strategy` turns a candidate value function
//! into the feedback rule "intervene at the first grid node where
//! v ≤ Mv + tie_tol, act by argmax".

use crate::expr::{self, Expression, VarSet};
use crate::model::ProblemSpec;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ImpulseError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("expression failed: {0}")]
    Eval(#[from] expr::EvalError),
    #[error("strategy indicator failed to parse: {0}")]
    Indicator(#[from] expr::ParseError),
    #[error("value function shape mismatch: {0}")]
    Shape(String),
}

// ─── spatial grid ───

/// Uniform rectangular grid over a box; node enumeration is row-major with
/// axis 0 slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    counts: Vec<usize>,
}

impl SpatialGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize>) -> Result<SpatialGrid, ImpulseError> {
        if lo.len() != hi.len() || lo.len() != counts.len() || lo.is_empty() {
            return Err(ImpulseError::Grid(
                "lo, hi and counts must have equal nonzero lengths".to_string(),
            ));
        }
        for i in 0..lo.len() {
            if counts[i] < 2 {
                return Err(ImpulseError::Grid(format!(
                    "axis {i} needs at least 2 nodes, got {}",
                    counts[i]
                )));
            }
            if !(lo[i] < hi[i]) {
                return Err(ImpulseError::Grid(format!(
                    "axis {i}: lo = {} must be below hi = {}",
                    lo[i], hi[i]
                )));
            }
        }
        Ok(SpatialGrid { lo, hi, counts })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn n_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.counts[axis] - 1) as f64
    }

    pub fn axis_coord(&self, axis: usize, index: usize) -> f64 {
        if index + 1 == self.counts[axis] {
            self.hi[axis] // land on the upper edge exactly
        } else {
            self.lo[axis] + index as f64 * self.spacing(axis)
        }
    }

    /// Decompose a flat node index into per-axis indices.
    pub fn node_indices(&self, flat: usize, out: &mut [usize]) {
        let mut rest = flat;
        for axis in (0..self.dim()).rev() {
            out[axis] = rest % self.counts[axis];
            rest /= self.counts[axis];
        }
    }

    /// Coordinates of a flat node index.
    pub fn node_into(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for axis in (0..self.dim()).rev() {
            let idx = rest % self.counts[axis];
            rest /= self.counts[axis];
            out[axis] = self.axis_coord(axis, idx);
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_into(flat, &mut out);
        out
    }

    /// Multilinear interpolation of per-node `values` at `x`, clamping to
    /// the box outside it.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let dim = self.dim();
        debug_assert_eq!(values.len(), self.n_nodes());
        debug_assert_eq!(x.len(), dim);
        // per-axis cell index and fractional weight
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        let mut cell_base = Vec::new();
        let mut cell_frac = Vec::new();
        let (base, frac): (&mut [usize], &mut [f64]) = if dim <= 8 {
            (&mut base[..dim], &mut frac[..dim])
        } else {
            cell_base.resize(dim, 0);
            cell_frac.resize(dim, 0.0);
            (&mut cell_base[..], &mut cell_frac[..])
        };
        for axis in 0..dim {
            let clamped = x[axis].clamp(self.lo[axis], self.hi[axis]);
            let u = (clamped - self.lo[axis]) / self.spacing(axis);
            let cell = (u.floor() as usize).min(self.counts[axis] - 2);
            base[axis] = cell;
            frac[axis] = (u - cell as f64).clamp(0.0, 1.0);
        }
        // accumulate over the 2^dim cell corners
        let mut total = 0.0;
        for corner in 0..(1usize << dim) {
            let mut weight = 1.0;
            let mut flat = 0;
            for axis in 0..dim {
                let hi_side = (corner >> axis) & 1 == 1;
                weight *= if hi_side { frac[axis] } else { 1.0 - frac[axis] };
                flat = flat * self.counts[axis] + base[axis] + usize::from(hi_side);
            }
            if weight != 0.0 {
                total += weight * values[flat];
            }
        }
        total
    }
}

// ─── value function ───

/// A value surface on time slices × spatial grid. Multilinear in x inside
/// the box, clamped to the boundary outside it, piecewise-constant backward
/// in t (a query between slices reads the next slice at or after it).
#[derive(Debug, Clone)]
pub struct ValueFunction {
    times: Vec<f64>,
    grid: SpatialGrid,
    values: Vec<f64>,
    stderr: Vec<f64>,
}

impl ValueFunction {
    pub fn new(
        times: Vec<f64>,
        grid: SpatialGrid,
        values: Vec<f64>,
        stderr: Vec<f64>,
    ) -> Result<ValueFunction, ImpulseError> {
        let expected = times.len() * grid.n_nodes();
        if values.len() != expected || stderr.len() != expected {
            return Err(ImpulseError::Shape(format!(
                "need {} × {} = {expected} values, got {} values / {} stderr entries",
                times.len(),
                grid.n_nodes(),
                values.len(),
                stderr.len()
            )));
        }
        if times.is_empty() || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ImpulseError::Shape(
                "time slices must be strictly increasing and non-empty".to_string(),
            ));
        }
        if let Some(bad) = values.iter().chain(stderr.iter()).find(|v| !v.is_finite()) {
            return Err(ImpulseError::Shape(format!("non-finite entry {bad}")));
        }
        Ok(ValueFunction {
            times,
            grid,
            values,
            stderr,
        })
    }

    pub fn constant(times: Vec<f64>, grid: SpatialGrid, value: f64) -> ValueFunction {
        let len = times.len() * grid.n_nodes();
        ValueFunction {
            times,
            grid,
            values: vec![value; len],
            stderr: vec![0.0; len],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Index of the slice a time query reads: the first slice at or after
    /// `t` (clamped to the final slice).
    pub fn slice_index(&self, t: f64) -> usize {
        let span = self.times.last().unwrap() - self.times[0];
        let eps = 1e-9 * span.max(1e-12);
        let idx = self.times.partition_point(|&tk| tk < t - eps);
        idx.min(self.times.len() - 1)
    }

    pub fn slice_values(&self, slice: usize) -> &[f64] {
        let m = self.grid.n_nodes();
        &self.values[slice * m..(slice + 1) * m]
    }

    pub fn slice_stderr(&self, slice: usize) -> &[f64] {
        let m = self.grid.n_nodes();
        &self.stderr[slice * m..(slice + 1) * m]
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self.grid.interpolate(self.slice_values(self.slice_index(t)), x)
    }

    pub fn stderr_at(&self, t: f64, x: &[f64]) -> f64 {
        self.grid.interpolate(self.slice_stderr(self.slice_index(t)), x)
    }

    /// Largest |self − other| over a probe list.
    pub fn max_abs_diff(&self, other: &ValueFunction, probes: &[(f64, Vec<f64>)]) -> f64 {
        probes
            .iter()
            .map(|(t, x)| (self.eval(*t, x) - other.eval(*t, x)).abs())
            .fold(0.0, f64::max)
    }
}

// ─── intervention operator ───

/// Best immediate-impulse value and the action achieving it (ties broken by
/// lowest action index).
pub fn intervention_op(
    v: &ValueFunction,
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
) -> Result<(f64, usize), ImpulseError> {
    let mut target = vec![0.0; spec.state_dim];
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (idx, b) in spec.actions.iter().enumerate() {
        spec.impulse_into(t, x, b, &mut target)?;
        let gain = v.eval(t, &target) - spec.cost_value(t, x, b)?;
        if gain > best {
            best = gain;
            best_idx = idx;
        }
    }
    Ok((best, best_idx))
}

/// The reflection obstacle `(t,x) ↦ Mv(t,x)` induced by a candidate value
/// function. Monotone in `v` pointwise.
pub struct Obstacle<'a> {
    v: &'a ValueFunction,
    spec: &'a ProblemSpec,
}

pub fn obstacle_from<'a>(v: &'a ValueFunction, spec: &'a ProblemSpec) -> Obstacle<'a> {
    Obstacle { v, spec }
}

impl Obstacle<'_> {
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, ImpulseError> {
        intervention_op(self.v, self.spec, t, x).map(|(value, _)| value)
    }
}

// ─── realized controls ───

/// One intervention on a simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseEvent {
    /// Grid step index of the intervention time τ_j.
    pub step: usize,
    /// Index into the problem's action list.
    pub action_index: usize,
    /// Cost ℓ(τ_j, X⁻, β_j) paid at the intervention, evaluated before the
    /// jump.
    pub cost: f64,
}

/// The realized impulse control of one path: the ordered intervention
/// sequence plus its cumulative cost. The cost process is left-continuous —
/// an impulse at step j enters Ξ strictly after j.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImpulseControl {
    /// Interventions in strictly increasing step order (at most one per
    /// grid node).
    pub events: Vec<ImpulseEvent>,
    /// True when the per-path cap stopped further interventions.
    pub capped: bool,
}

impl ImpulseControl {
    pub fn count(&self) -> usize {
        self.events.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.events.iter().map(|e| e.cost).sum()
    }

    /// Ξ at grid step `step`: total cost of impulses strictly before it.
    pub fn cost_before(&self, step: usize) -> f64 {
        self.events
            .iter()
            .take_while(|e| e.step < step)
            .map(|e| e.cost)
            .sum()
    }
}

// ─── strategies ───

/// A feedback intervention rule, evaluated path by path at every grid node.
pub enum StrategyRule<'a> {
    /// Intervene where v ≤ Mv + tie_tol, acting by argmax: the feedback
    /// form of the optimal rule, read off a computed value function.
    Optimal {
        value: &'a ValueFunction,
        tie_tol: f64,
    },
    /// Intervene where a scalar indicator in (t, x) is ≥ 0, with a fixed
    /// action. Loadable from config for strategy tournaments.
    Threshold {
        indicator: Expression,
        action_index: usize,
    },
    Never,
}

impl StrategyRule<'_> {
    /// Parse a threshold rule from its config description.
    pub fn threshold(
        indicator_text: &str,
        action_index: usize,
        spec: &ProblemSpec,
    ) -> Result<StrategyRule<'static>, ImpulseError> {
        if action_index >= spec.actions.len() {
            return Err(ImpulseError::Grid(format!(
                "threshold rule action index {action_index} out of range ({} actions)",
                spec.actions.len()
            )));
        }
        let indicator = expr::parse(indicator_text, VarSet::coefficient(spec.state_dim))?;
        Ok(StrategyRule::Threshold {
            indicator,
            action_index,
        })
    }

    /// Decide whether to intervene at `(t, x)` and with which action index.
    /// Never intervenes at the horizon.
    pub fn decide(
        &self,
        spec: &ProblemSpec,
        t: f64,
        x: &[f64],
    ) -> Result<Option<usize>, ImpulseError> {
        if t >= spec.horizon * (1.0 - 1e-12) {
            return Ok(None);
        }
        match self {
            StrategyRule::Never => Ok(None),
            StrategyRule::Threshold {
                indicator,
                action_index,
            } => {
                let ind = indicator.evaluate(&expr::EvalContext::coefficient(t, x))?;
                Ok((ind >= 0.0).then_some(*action_index))
            }
            StrategyRule::Optimal { value, tie_tol } => {
                let (m, best) = intervention_op(value, spec, t, x)?;
                Ok((value.eval(t, x) <= m + tie_tol).then_some(best))
            }
        }
    }

    /// One-line description for run reports.
    pub fn describe(&self) -> String {
        match self {
            StrategyRule::Never => "never".to_string(),
            StrategyRule::Threshold {
                indicator,
                action_index,
            } => format!("threshold[{indicator} >= 0 -> action {action_index}]"),
            StrategyRule::Optimal { tie_tol, .. } => {
                format!("optimal[tie_tol = {tie_tol:.6e}]")
            }
        }
    }
}

/// The feedback rule of the computed value function.
pub fn optimal_strategy<'a>(
    v: &'a ValueFunction,
    _spec: &ProblemSpec,
    tie_tol: f64,
) -> StrategyRule<'a> {
    StrategyRule::Optimal { value: v, tie_tol }
}

/// Default intervention tie band: twice the noise floor, i.e.
/// 2 · (median reported standard error + a second-difference estimate of the
/// interpolation error).
pub fn default_tie_tol(v: &ValueFunction) -> f64 {
    let mut errs: Vec<f64> = v.stderr.iter().copied().filter(|s| s.is_finite()).collect();
    let median_se = median(&mut errs);

    // interpolation error from second differences along each axis of the
    // first and last slices
    let grid = v.grid();
    let dim = grid.dim();
    let mut d2 = Vec::new();
    let mut idx = vec![0usize; dim];
    for slice in [0, v.times.len() - 1] {
        let values = v.slice_values(slice);
        for flat in 0..grid.n_nodes() {
            grid.node_indices(flat, &mut idx);
            for axis in 0..dim {
                if idx[axis] == 0 || idx[axis] + 1 >= grid.counts()[axis] {
                    continue;
                }
                let stride: usize = grid.counts()[axis + 1..].iter().product();
                let center = values[flat];
                let left = values[flat - stride];
                let right = values[flat + stride];
                d2.push((left - 2.0 * center + right).abs() / 8.0);
            }
        }
    }
    let interp = median(&mut d2);
    2.0 * (median_se + interp)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}
