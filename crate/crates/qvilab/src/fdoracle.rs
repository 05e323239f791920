//! Independent finite-difference solver for the impulse-control variational
//! inequality on 1-D and 2-D state spaces. It shares nothing with the Monte
//! Carlo pipeline beyond the problem description and the value-function
//! container, which is what makes it usable as a verification oracle.
//!
//! Scheme: backward θ-stepping of v_t + a·∇v + ½ tr(σσᵀ D²v) + f = 0 with
//! the driver lagged (evaluated on the next slice), central differences with
//! an upwind fallback when a cell Péclet number exceeds 2, the 2-D
//! cross-derivative handled explicitly so the implicit matrix stays a
//! 5-point M-matrix, Dirichlet boundaries frozen at the terminal reward,
//! and after each step a linear-complementarity solve against the
//! intervention obstacle, re-sweeping until the contact set stabilizes so
//! chained impulses resolve within one slice.

use crate::expr::{self, BinOp, Expression, Func, Node, Var};
use crate::impulse::{ImpulseError, SpatialGrid, ValueFunction};
use crate::model::{FdSection, ProblemSpec, ValueQuery};
use crate::sde::TimeGrid;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum FdError {
    #[error("grid rejected: {0}")]
    Grid(String),
    #[error("configuration rejected: {0}")]
    Config(String),
    #[error("stability violated: {0}")]
    Stability(String),
    #[error("iteration did not settle: {0}")]
    Sweeps(String),
    #[error("expression evaluation failed: {0}")]
    Eval(String),
    #[error("outer iteration diverged: {0}")]
    Diverged(String),
    #[error("value-function operation failed: {0}")]
    Impulse(#[from] ImpulseError),
}

impl From<expr::EvalError> for FdError {
    fn from(e: expr::EvalError) -> Self {
        FdError::Eval(e.to_string())
    }
}

impl From<crate::sde::SdeError> for FdError {
    fn from(e: crate::sde::SdeError) -> Self {
        FdError::Grid(e.to_string())
    }
}

/// Space–time lattice for the finite-difference solver.
#[derive(Debug, Clone)]
pub struct FdGrid {
    space: SpatialGrid,
    n_steps: usize,
}

impl FdGrid {
    pub fn new(
        lo: Vec<f64>,
        hi: Vec<f64>,
        counts: Vec<usize>,
        n_steps: usize,
    ) -> Result<FdGrid, FdError> {
        if lo.len() > 2 {
            return Err(FdError::Grid(format!(
                "finite differences support at most two state dimensions, got {}",
                lo.len()
            )));
        }
        if counts.iter().any(|&c| c < 3) {
            return Err(FdError::Grid(
                "need at least three nodes per axis".to_string(),
            ));
        }
        if n_steps == 0 {
            return Err(FdError::Grid("need at least one time step".to_string()));
        }
        Ok(FdGrid {
            space: SpatialGrid::new(lo, hi, counts)?,
            n_steps,
        })
    }

    pub fn space(&self) -> &SpatialGrid {
        &self.space
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// Finite-difference solve output with its scheme diagnostics.
#[derive(Debug, Clone)]
pub struct FdSolution {
    pub value: ValueFunction,
    /// Largest violation of v ≥ Mv over interior nodes and slices.
    pub feasibility_gap: f64,
    /// Largest violation of the discrete complementarity condition
    /// min(v − Mv, Av − rhs) = 0 over interior nodes and slices.
    pub complementarity_gap: f64,
    /// Most contact-set sweeps any slice needed.
    pub max_contact_sweeps: usize,
}

/// Intervention operator on one time slice: best value-minus-cost over the
/// action set, interpolating the slice at the mapped state.
fn slice_intervention(
    spec: &ProblemSpec,
    space: &SpatialGrid,
    slice: &[f64],
    t: f64,
    x: &[f64],
    mapped: &mut [f64],
) -> Result<f64, FdError> {
    let mut best = f64::NEG_INFINITY;
    for b in &spec.actions {
        spec.impulse_into(t, x, b, mapped)?;
        let v = space.interpolate(slice, mapped);
        let cost = spec.cost_value(t, x, b)?;
        if v - cost > best {
            best = v - cost;
        }
    }
    Ok(best)
}

struct Stencil {
    /// Per axis: rate toward the upper neighbour, then the lower one.
    up: [Vec<f64>; 2],
    down: [Vec<f64>; 2],
    /// Cross-diffusion coefficient (σσᵀ)₁₂ per node (2-D only).
    cross: Vec<f64>,
    /// σ per node, row-major state × noise (for σᵀ∇v in the driver).
    sigma: Vec<f64>,
}

fn assemble_stencil(
    spec: &ProblemSpec,
    space: &SpatialGrid,
    nodes: &[Vec<f64>],
    t: f64,
) -> Result<Stencil, FdError> {
    let n = spec.state_dim;
    let d = spec.noise_dim;
    let n_nodes = nodes.len();
    let mut st = Stencil {
        up: [vec![0.0; n_nodes], vec![0.0; n_nodes]],
        down: [vec![0.0; n_nodes], vec![0.0; n_nodes]],
        cross: vec![0.0; if n == 2 { n_nodes } else { 0 }],
        sigma: vec![0.0; n_nodes * n * d],
    };
    let mut a = vec![0.0; n];
    let mut sig = vec![0.0; n * d];
    for (idx, x) in nodes.iter().enumerate() {
        spec.drift_into(t, x, &mut a)?;
        spec.vol_into(t, x, &mut sig)?;
        st.sigma[idx * n * d..(idx + 1) * n * d].copy_from_slice(&sig);
        for axis in 0..n {
            let dx = space.spacing(axis);
            // ½ (σσᵀ)_{axis,axis}
            let diff = 0.5
                * (0..d)
                    .map(|j| sig[axis * d + j] * sig[axis * d + j])
                    .sum::<f64>();
            let drift = a[axis];
            let base = diff / (dx * dx);
            let peclet = if diff > 0.0 {
                drift.abs() * dx / diff
            } else {
                f64::INFINITY
            };
            let (up, down) = if drift == 0.0 {
                (base, base)
            } else if peclet <= 2.0 {
                (base + drift / (2.0 * dx), base - drift / (2.0 * dx))
            } else {
                // upwind the first derivative to keep the scheme monotone
                (base + drift.max(0.0) / dx, base + (-drift).max(0.0) / dx)
            };
            st.up[axis][idx] = up;
            st.down[axis][idx] = down;
        }
        if n == 2 {
            st.cross[idx] = (0..d).map(|j| sig[j] * sig[d + j]).sum::<f64>();
        }
    }
    Ok(st)
}

/// Solve the local variational inequality by backward finite differences.
/// `frozen` supplies values for drivers that reference the value function.
pub fn fd_solve_local_qvi(
    spec: &ProblemSpec,
    grid: &FdGrid,
    fd: &FdSection,
    frozen: Option<&ValueFunction>,
) -> Result<FdSolution, FdError> {
    if spec.state_dim != grid.space.dim() {
        return Err(FdError::Grid(format!(
            "grid dimension {} does not match state dimension {}",
            grid.space.dim(),
            spec.state_dim
        )));
    }
    if spec.is_nonlocal() && frozen.is_none() {
        return Err(FdError::Config(
            "the driver references V(...): run the outer iteration instead".to_string(),
        ));
    }
    let theta = fd.theta;
    if !(0.0..=1.0).contains(&theta) {
        return Err(FdError::Config(format!(
            "theta must lie in [0, 1], got {theta}"
        )));
    }

    let n = spec.state_dim;
    let d = spec.noise_dim;
    let space = &grid.space;
    let n_nodes = space.n_nodes();
    let n_steps = grid.n_steps;
    let tgrid = TimeGrid::new(0.0, spec.horizon, n_steps)?;
    let dt = tgrid.dt();
    let counts = space.counts().to_vec();
    let stride = |axis: usize| -> usize {
        if axis == 0 {
            counts[1..].iter().product::<usize>().max(1)
        } else {
            1
        }
    };

    let nodes: Vec<Vec<f64>> = (0..n_nodes).map(|i| space.node(i)).collect();
    let mut axis_idx = vec![0usize; n];
    let mut interior = vec![false; n_nodes];
    for i in 0..n_nodes {
        space.node_indices(i, &mut axis_idx);
        interior[i] = axis_idx
            .iter()
            .zip(&counts)
            .all(|(&k, &c)| k > 0 && k + 1 < c);
    }

    let value_closure = frozen
        .map(|vf| move |t: f64, p: &[f64]| -> Result<f64, String> { Ok(vf.eval(t, p)) });
    let value_query: Option<ValueQuery> = value_closure
        .as_ref()
        .map(|c| c as &(dyn Fn(f64, &[f64]) -> Result<f64, String> + Sync));

    // terminal slice, also the frozen Dirichlet data
    let mut values = vec![0.0; (n_steps + 1) * n_nodes];
    for i in 0..n_nodes {
        let psi = spec.terminal_value(&nodes[i])?;
        if !psi.is_finite() {
            return Err(FdError::Eval(format!(
                "terminal reward is not finite at {:?}",
                nodes[i]
            )));
        }
        values[n_steps * n_nodes + i] = psi;
    }

    let dirichlet: Vec<f64> = values[n_steps * n_nodes..].to_vec();
    let scale = 1.0 + dirichlet.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut feasibility_gap = 0.0f64;
    let mut complementarity_gap = 0.0f64;
    let mut max_contact_sweeps = 0usize;

    let mut grad = vec![0.0; n];
    let mut z = vec![0.0; d];
    let mut mapped = vec![0.0; n];

    for m in (0..n_steps).rev() {
        let t = tgrid.time(m);
        let t_next = tgrid.time(m + 1);
        let st = assemble_stencil(spec, space, &nodes, t)?;
        let st_next = if theta < 1.0 {
            Some(assemble_stencil(spec, space, &nodes, t_next)?)
        } else {
            None
        };
        let (v_prev_slice, v_next_slice) = values.split_at_mut((m + 1) * n_nodes);
        let v_next = &v_next_slice[..n_nodes];
        let v = &mut v_prev_slice[m * n_nodes..];

        // stability of the explicit part
        for i in 0..n_nodes {
            if !interior[i] {
                continue;
            }
            let mut explicit_rate = 0.0;
            if let Some(sn) = &st_next {
                for axis in 0..n {
                    explicit_rate += (1.0 - theta) * (sn.up[axis][i] + sn.down[axis][i]);
                }
            }
            if n == 2 {
                explicit_rate +=
                    st.cross[i].abs() / (space.spacing(0) * space.spacing(1));
            }
            if dt * explicit_rate > 1.0 + 1e-12 {
                return Err(FdError::Stability(format!(
                    "explicit rate {:.3e} at node {i} needs dt ≤ {:.3e}, have {:.3e} \
                     (raise theta or the number of time steps)",
                    explicit_rate,
                    1.0 / explicit_rate,
                    dt
                )));
            }
        }

        // right-hand side: next slice + lagged driver + explicit pieces
        let mut rhs = vec![0.0; n_nodes];
        let mut diag = vec![1.0; n_nodes];
        for i in 0..n_nodes {
            if !interior[i] {
                // Dirichlet: frozen at the terminal reward
                rhs[i] = dirichlet[i];
                continue;
            }
            // σᵀ∇v on the next slice, central differences
            for axis in 0..n {
                let s = stride(axis);
                grad[axis] =
                    (v_next[i + s] - v_next[i - s]) / (2.0 * space.spacing(axis));
            }
            for j in 0..d {
                z[j] = (0..n)
                    .map(|k| st.sigma[i * n * d + k * d + j] * grad[k])
                    .sum();
            }
            let f = spec
                .driver_value(t, &nodes[i], v_next[i], &z, value_query)
                .map_err(|e| FdError::Eval(e.to_string()))?;
            let mut acc = v_next[i] + dt * f;
            if let Some(sn) = &st_next {
                for axis in 0..n {
                    let s = stride(axis);
                    acc += dt
                        * (1.0 - theta)
                        * (sn.up[axis][i] * (v_next[i + s] - v_next[i])
                            + sn.down[axis][i] * (v_next[i - s] - v_next[i]));
                }
            }
            if n == 2 {
                let s0 = stride(0);
                let s1 = stride(1);
                let cross = (v_next[i + s0 + s1] + v_next[i - s0 - s1]
                    - v_next[i + s0 - s1]
                    - v_next[i - s0 + s1])
                    / (4.0 * space.spacing(0) * space.spacing(1));
                acc += dt * st.cross[i] * cross;
            }
            rhs[i] = acc;
            let mut rate_sum = 0.0;
            for axis in 0..n {
                rate_sum += st.up[axis][i] + st.down[axis][i];
            }
            diag[i] = 1.0 + theta * dt * rate_sum;
        }

        // warm start from the next slice, boundaries already frozen
        v.copy_from_slice(v_next);
        for i in 0..n_nodes {
            if !interior[i] {
                v[i] = dirichlet[i];
            }
        }

        // contact-set sweeps: the obstacle reads the slice being solved, so
        // re-derive it until projection no longer changes anything
        let mut obstacle = vec![0.0; n_nodes];
        let mut settled = false;
        let mut sweeps = 0usize;
        while sweeps < fd.max_sweeps {
            sweeps += 1;
            for i in 0..n_nodes {
                obstacle[i] = if interior[i] {
                    slice_intervention(spec, space, v, t, &nodes[i], &mut mapped)?
                } else {
                    f64::NEG_INFINITY
                };
            }
            // projected Gauss–Seidel on (I − θ Δt L) v = rhs, v ≥ obstacle
            let mut converged = false;
            for _ in 0..fd.lcp_max_iter {
                let mut delta = 0.0f64;
                for i in 0..n_nodes {
                    if !interior[i] {
                        continue;
                    }
                    let mut acc = rhs[i];
                    for axis in 0..n {
                        let s = stride(axis);
                        acc += theta
                            * dt
                            * (st.up[axis][i] * v[i + s] + st.down[axis][i] * v[i - s]);
                    }
                    let cand = (acc / diag[i]).max(obstacle[i]);
                    delta = delta.max((cand - v[i]).abs());
                    v[i] = cand;
                }
                if delta <= fd.lcp_tol * scale {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(FdError::Sweeps(format!(
                    "complementarity solve did not converge at t = {t:.4} \
                     within {} passes",
                    fd.lcp_max_iter
                )));
            }
            // has the projection chained? re-derive the obstacle and check
            let mut gap = 0.0f64;
            for i in 0..n_nodes {
                if interior[i] {
                    let o = slice_intervention(spec, space, v, t, &nodes[i], &mut mapped)?;
                    gap = gap.max(o - v[i]);
                }
            }
            if gap <= 1e-10 * scale {
                settled = true;
                break;
            }
        }
        if !settled {
            return Err(FdError::Sweeps(format!(
                "contact set did not stabilize at t = {t:.4} within {} sweeps",
                fd.max_sweeps
            )));
        }
        max_contact_sweeps = max_contact_sweeps.max(sweeps);

        // scheme diagnostics on the accepted slice
        for i in 0..n_nodes {
            if !interior[i] {
                continue;
            }
            let o = slice_intervention(spec, space, v, t, &nodes[i], &mut mapped)?;
            feasibility_gap = feasibility_gap.max(o - v[i]);
            let mut av = diag[i] * v[i];
            for axis in 0..n {
                let s = stride(axis);
                av -= theta * dt * (st.up[axis][i] * v[i + s] + st.down[axis][i] * v[i - s]);
            }
            let residual = av - rhs[i];
            let slack = v[i] - o;
            complementarity_gap = complementarity_gap.max(residual.min(slack).abs());
        }
    }

    let value = ValueFunction::new(
        tgrid.times(),
        space.clone(),
        values,
        vec![0.0; (n_steps + 1) * n_nodes],
    )?;
    Ok(FdSolution {
        value,
        feasibility_gap,
        complementarity_gap,
        max_contact_sweeps,
    })
}

/// Outer iteration for drivers referencing the value function: freeze the
/// referenced values at the previous finite-difference solution (zero to
/// start), solve the local problem, and repeat until the surfaces settle.
/// Returns the solution together with the per-iteration sup increments.
pub fn fd_solve_nonlocal_qvi(
    spec: &ProblemSpec,
    grid: &FdGrid,
    fd: &FdSection,
) -> Result<(FdSolution, Vec<f64>), FdError> {
    if !spec.is_nonlocal() {
        return Err(FdError::Config(
            "the driver has no V(...) term: solve the local problem directly".to_string(),
        ));
    }
    let tgrid = TimeGrid::new(0.0, spec.horizon, grid.n_steps)?;
    let mut v_prev = ValueFunction::constant(tgrid.times(), grid.space.clone(), 0.0);
    let mut increments = Vec::new();
    let mut consecutive_increases = 0usize;
    for _m in 1..=fd.k_max {
        let sol = fd_solve_local_qvi(spec, grid, fd, Some(&v_prev))?;
        let mut inc = 0.0f64;
        for s in 0..tgrid.times().len() {
            let a = sol.value.slice_values(s);
            let b = v_prev.slice_values(s);
            for i in 0..grid.space.n_nodes() {
                inc = inc.max((a[i] - b[i]).abs());
            }
        }
        if let Some(&last) = increments.last() {
            if inc > last {
                consecutive_increases += 1;
            } else {
                consecutive_increases = 0;
            }
        }
        increments.push(inc);
        if consecutive_increases >= 3 {
            return Err(FdError::Diverged(format!(
                "outer increments grew three times in a row, last {inc:.3e}"
            )));
        }
        v_prev = sol.value.clone();
        if inc <= fd.tol {
            return Ok((sol, increments));
        }
    }
    // ran out of iterations: hand back the last iterate and its history
    let sol = fd_solve_local_qvi(spec, grid, fd, Some(&v_prev))?;
    Ok((sol, increments))
}

/// Exponential-scaling transform: returns the problem whose solution is
/// e^{λt} times the original one — terminal reward scaled by e^{λT},
/// intervention costs by e^{λt}, and the driver rewritten as
/// −λy + e^{λt} f(t, x, e^{−λt} y, e^{−λt} z).
pub fn transform_lambda(spec: &ProblemSpec, lambda: f64) -> ProblemSpec {
    if lambda == 0.0 {
        return spec.clone();
    }
    let mut out = spec.clone();

    fn bin(op: BinOp, l: Node, r: Node) -> Node {
        Node::Bin(op, Box::new(l), Box::new(r))
    }
    let exp_lt = |sign: f64| -> Node {
        Node::Call(
            Func::Exp,
            vec![bin(BinOp::Mul, Node::Const(sign * lambda), Node::Var(Var::T))],
        )
    };

    // driver: substitute y ← e^{−λt} y, z ← e^{−λt} z, then wrap
    fn substitute(node: &Node, factor: &Node) -> Node {
        match node {
            Node::Const(c) => Node::Const(*c),
            Node::Var(Var::Y) => Node::Bin(
                BinOp::Mul,
                Box::new(factor.clone()),
                Box::new(Node::Var(Var::Y)),
            ),
            Node::Var(Var::Z(j)) => Node::Bin(
                BinOp::Mul,
                Box::new(factor.clone()),
                Box::new(Node::Var(Var::Z(*j))),
            ),
            Node::Var(v) => Node::Var(*v),
            Node::Neg(inner) => Node::Neg(Box::new(substitute(inner, factor))),
            Node::Bin(op, l, r) => Node::Bin(
                *op,
                Box::new(substitute(l, factor)),
                Box::new(substitute(r, factor)),
            ),
            Node::Call(f, args) => {
                Node::Call(*f, args.iter().map(|a| substitute(a, factor)).collect())
            }
            Node::ValueTerm(args) => {
                Node::ValueTerm(args.iter().map(|a| substitute(a, factor)).collect())
            }
        }
    }
    let damp = exp_lt(-1.0);
    let substituted = substitute(spec.driver.root(), &damp);
    let driver_root = bin(
        BinOp::Add,
        bin(BinOp::Mul, Node::Const(-lambda), Node::Var(Var::Y)),
        bin(BinOp::Mul, exp_lt(1.0), substituted),
    );
    out.driver = Expression::from_node(driver_root, spec.driver.vars());

    // costs pick up e^{λt}; the terminal reward a constant e^{λT}
    out.cost = Expression::from_node(
        bin(BinOp::Mul, exp_lt(1.0), spec.cost.root().clone()),
        spec.cost.vars(),
    );
    out.terminal = Expression::from_node(
        bin(
            BinOp::Mul,
            Node::Const((lambda * spec.horizon).exp()),
            spec.terminal.root().clone(),
        ),
        spec.terminal.vars(),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_spec;

    #[test]
    fn grid_rejects_degenerate_shapes() {
        assert!(FdGrid::new(vec![0.0], vec![1.0], vec![2], 10).is_err());
        assert!(FdGrid::new(vec![0.0], vec![1.0], vec![5], 0).is_err());
        assert!(
            FdGrid::new(vec![0.0; 3], vec![1.0; 3], vec![5; 3], 10).is_err(),
            "three dimensions are out of scope"
        );
        assert!(FdGrid::new(vec![-1.0], vec![1.0], vec![11], 10).is_ok());
    }

    const LINEAR: &str = r#"
[problem]
horizon = 1.0
drift = ["0"]
vol = [["0.3"]]
driver = "0.25"
terminal = "x1"
impulse = ["0 * b1"]
cost = "1000000"
box_lo = [-2.0]
box_hi = [2.0]
[problem.constants]
confinement_radius = 1.0
cost_floor = 1000000.0
driver_lipschitz = 0.1
growth_power = 2.0
driver_growth = 0.25
terminal_growth = 2.0
coeff_growth = 0.3
coeff_lipschitz = 0.3
[actions]
list = [[0.0]]
"#;

    #[test]
    fn linear_terminal_with_constant_driver_is_integrated_exactly() {
        let spec = load_spec(LINEAR).unwrap();
        let grid = FdGrid::new(vec![-2.0], vec![2.0], vec![41], 40).unwrap();
        let sol = fd_solve_local_qvi(&spec, &grid, &FdSection::default(), None).unwrap();
        // v(t, x) = x + 0.25 (T − t); the second difference of a linear
        // function vanishes, so away from the frozen boundary the scheme
        // integrates the driver exactly
        for &x in &[-0.5, -0.1, 0.0, 0.2, 0.5] {
            let got = sol.value.eval(0.0, &[x]);
            assert!(
                (got - (x + 0.25)).abs() < 1e-3,
                "linear drift-free value at {x}: {got:.6} vs {:.6}",
                x + 0.25
            );
        }
        assert!(sol.feasibility_gap <= 1e-10);
        // Crank–Nicolson at a stable step count agrees
        let cn = FdSection {
            theta: 0.5,
            ..FdSection::default()
        };
        let sol_cn = fd_solve_local_qvi(&spec, &grid, &cn, None).unwrap();
        assert!((sol_cn.value.eval(0.0, &[0.0]) - 0.25).abs() < 1e-3);
    }

    #[test]
    fn explicit_scheme_refuses_unstable_steps() {
        let spec = load_spec(LINEAR).unwrap();
        // dt = 0.1 against dt_max = Δx²/σ² = 0.01/0.09 ≈ 0.111… is fine,
        // but 5 steps (dt = 0.2) is not
        let grid = FdGrid::new(vec![-2.0], vec![2.0], vec![41], 5).unwrap();
        let explicit = FdSection {
            theta: 0.0,
            ..FdSection::default()
        };
        let err = fd_solve_local_qvi(&spec, &grid, &explicit, None).unwrap_err();
        assert!(
            matches!(err, FdError::Stability(_)),
            "expected a stability refusal, got {err:?}"
        );
    }

    #[test]
    fn static_problem_keeps_the_terminal_shape_when_impulses_never_pay() {
        let text = r#"
[problem]
horizon = 1.0
drift = ["0"]
vol = [["0"]]
driver = "0"
terminal = "abs(x1)"
impulse = ["0 * b1"]
cost = "1"
box_lo = [-2.0]
box_hi = [2.0]
[problem.constants]
confinement_radius = 1.0
cost_floor = 1.0
driver_lipschitz = 0.1
growth_power = 2.0
driver_growth = 0.1
terminal_growth = 2.0
coeff_growth = 0.1
coeff_lipschitz = 0.1
[actions]
list = [[0.0]]
"#;
        let spec = load_spec(text).unwrap();
        let grid = FdGrid::new(vec![-2.0], vec![2.0], vec![21], 10).unwrap();
        let sol = fd_solve_local_qvi(&spec, &grid, &FdSection::default(), None).unwrap();
        // no dynamics and Mv = v(0) − 1 = −1 < |x|: every slice equals ψ
        for s in 0..=10 {
            for i in 0..21 {
                let x = sol.value.grid().node(i)[0];
                assert!(
                    (sol.value.slice_values(s)[i] - x.abs()).abs() < 1e-12,
                    "slice {s} node {i}"
                );
            }
        }
        assert_eq!(sol.max_contact_sweeps, 1, "no chaining without profit");
    }

    /// European put via a Cox–Ross–Rubinstein tree (no early exercise): on
    /// the catalog problem the intervention never pays, so the variational
    /// solution coincides with the plain expectation.
    fn european_put_binomial(s0: f64, strike: f64, r: f64, sigma: f64, t: f64, steps: usize) -> f64 {
        let dt = t / steps as f64;
        let u = (sigma * dt.sqrt()).exp();
        let dn = 1.0 / u;
        let disc = (-r * dt).exp();
        let p = ((r * dt).exp() - dn) / (u - dn);
        let mut values: Vec<f64> = (0..=steps)
            .map(|j| {
                let s = s0 * u.powi(j as i32) * dn.powi((steps - j) as i32);
                (strike - s).max(0.0)
            })
            .collect();
        for _ in (0..steps).rev() {
            for j in 0..values.len() - 1 {
                values[j] = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
            }
            values.pop();
        }
        values[0]
    }

    #[test]
    fn catalog_reference_matches_the_tree_and_self_converges() {
        let spec = load_spec(crate::model::tests::PUT_CATALOG).unwrap();
        let fd = FdSection::default();
        let mut probe_values = Vec::new();
        for (nodes, steps) in [(101usize, 50usize), (201, 100), (401, 200)] {
            let grid = FdGrid::new(vec![-1.5], vec![3.5], vec![nodes], steps).unwrap();
            let sol = fd_solve_local_qvi(&spec, &grid, &fd, None).unwrap();
            probe_values.push(sol.value.eval(0.0, &[1.0]));
        }
        let tree = european_put_binomial(1.0, 1.0, 0.05, 0.2, 1.0, 500);
        assert!(
            (probe_values[2] - tree).abs() < 2e-3,
            "catalog value {:.5} vs tree {tree:.5}",
            probe_values[2]
        );
        let d1 = (probe_values[1] - probe_values[0]).abs();
        let d2 = (probe_values[2] - probe_values[1]).abs();
        assert!(
            d2 <= 0.6 * d1 + 1e-12,
            "self-convergence factor {:.3} above 0.6 (changes {d1:.2e}, {d2:.2e})",
            d2 / d1
        );
    }

    const HUDDLE_FD: &str = r#"
[problem]
horizon = 1.0
drift = ["0"]
vol = [["0.5"]]
driver = "2 * exp(0 - x1^2)"
terminal = "0"
impulse = ["0 * b1"]
cost = "0.3"
box_lo = [-3.0]
box_hi = [3.0]
[problem.constants]
confinement_radius = 1.0
cost_floor = 0.3
driver_lipschitz = 0.1
growth_power = 2.0
driver_growth = 2.0
terminal_growth = 1.0
coeff_growth = 0.5
coeff_lipschitz = 0.5
[actions]
list = [[0.0]]
"#;

    #[test]
    fn active_impulses_satisfy_feasibility_and_complementarity() {
        let spec = load_spec(HUDDLE_FD).unwrap();
        let grid = FdGrid::new(vec![-3.0], vec![3.0], vec![121], 60).unwrap();
        let sol = fd_solve_local_qvi(&spec, &grid, &FdSection::default(), None).unwrap();
        assert!(
            sol.feasibility_gap <= 1e-9,
            "feasibility gap {:.2e}",
            sol.feasibility_gap
        );
        assert!(
            sol.complementarity_gap <= 1e-6,
            "complementarity gap {:.2e}",
            sol.complementarity_gap
        );
        // terminal slice is the terminal reward exactly
        for i in 0..121 {
            assert_eq!(sol.value.slice_values(60)[i], 0.0);
        }
        // impulses genuinely bind far from the origin at early times
        let far = sol.value.eval(0.0, &[2.5]);
        let origin = sol.value.eval(0.0, &[0.0]);
        assert!(
            (far - (origin - 0.3)).abs() < 1e-6,
            "far field {far:.5} should equal the reset target {:.5}",
            origin - 0.3
        );
        assert!(origin > 0.8, "sitting at the origin collects the flow");
    }

    #[test]
    fn two_dimensional_generator_handles_drift_diffusion_and_cross_terms() {
        let text = r#"
[problem]
state_dim = 2
noise_dim = 2
horizon = 1.0
drift = ["0", "0"]
vol = [["0.2", "0"], ["0.1", "0.2"]]
driver = "0"
terminal = "x1 * x2"
impulse = ["0 * b1", "0 * b1"]
cost = "1000000"
box_lo = [-2.0, -2.0]
box_hi = [2.0, 2.0]
[problem.constants]
confinement_radius = 1.0
cost_floor = 1000000.0
driver_lipschitz = 0.1
growth_power = 2.0
driver_growth = 0.1
terminal_growth = 2.0
coeff_growth = 0.3
coeff_lipschitz = 0.3
[actions]
list = [[0.0]]
"#;
        let spec = load_spec(text).unwrap();
        let grid = FdGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![21, 21], 20).unwrap();
        let sol = fd_solve_local_qvi(&spec, &grid, &FdSection::default(), None).unwrap();
        // L(x1 x2) = (σσᵀ)₁₂ = 0.2·0.1 = 0.02, so v = x1 x2 + 0.02 (T − t);
        // the bilinear form is exact for both the cross stencil and the
        // interpolation, leaving only the boundary freeze as error
        for (x1, x2) in [(0.3, -0.4), (0.0, 0.0), (-0.5, -0.25), (0.5, 0.5)] {
            let got = sol.value.eval(0.0, &[x1, x2]);
            let want = x1 * x2 + 0.02;
            assert!(
                (got - want).abs() < 2e-3,
                "2-D value at ({x1}, {x2}): {got:.5} vs {want:.5}"
            );
        }
    }

    #[test]
    fn vacuous_value_reference_equals_the_local_solve_after_two_iterations() {
        let text = LINEAR.replace("driver = \"0.25\"", "driver = \"0 * V(x1) + 0.25\"");
        let spec = load_spec(&text).unwrap();
        assert!(spec.is_nonlocal());
        let grid = FdGrid::new(vec![-2.0], vec![2.0], vec![41], 40).unwrap();
        let (sol, increments) = fd_solve_nonlocal_qvi(&spec, &grid, &FdSection::default()).unwrap();
        assert_eq!(increments.len(), 2, "increments were {increments:?}");
        assert_eq!(increments[1], 0.0, "second pass reproduces the first exactly");
        let local_spec = load_spec(LINEAR).unwrap();
        let local = fd_solve_local_qvi(&local_spec, &grid, &FdSection::default(), None).unwrap();
        for s in 0..=40 {
            assert_eq!(sol.value.slice_values(s), local.value.slice_values(s));
        }
    }

    #[test]
    fn nonlocal_fixed_point_is_self_consistent_and_contracts() {
        let text = crate::model::tests::PUT_CATALOG.replace(
            "driver = \"-0.05*y\"",
            "driver = \"0.1 * V(0) - y\"",
        );
        let text = text.replace("driver_lipschitz = 0.05", "driver_lipschitz = 1.0");
        let spec = load_spec(&text).unwrap();
        let grid = FdGrid::new(vec![-1.5], vec![3.5], vec![101], 50).unwrap();
        let fd = FdSection {
            tol: 1e-6,
            ..FdSection::default()
        };
        let (sol, increments) = fd_solve_nonlocal_qvi(&spec, &grid, &fd).unwrap();
        assert!(
            increments.len() >= 3,
            "expected several outer passes, got {increments:?}"
        );
        for w in increments[1..].windows(2) {
            assert!(
                w[1] <= w[0] + 1e-15,
                "outer increments must decay after the first pass: {increments:?}"
            );
        }
        // residual: one more frozen solve moves nothing beyond tolerance
        let re = fd_solve_local_qvi(&spec, &grid, &fd, Some(&sol.value)).unwrap();
        let mut drift = 0.0f64;
        for s in 0..=50 {
            let a = re.value.slice_values(s);
            let b = sol.value.slice_values(s);
            for i in 0..101 {
                drift = drift.max((a[i] - b[i]).abs());
            }
        }
        assert!(
            drift <= fd.tol,
            "fixed-point residual {drift:.2e} above inner tolerance"
        );
    }

    #[test]
    fn lambda_transform_rewrites_the_equation_pieces() {
        let spec = load_spec(crate::model::tests::PUT_CATALOG).unwrap();

        // identity at λ = 0
        let same = transform_lambda(&spec, 0.0);
        assert_eq!(format!("{}", same.driver), format!("{}", spec.driver));

        // f ≡ 0 picks up exactly the −λ y term
        let zero_f = load_spec(
            &crate::model::tests::PUT_CATALOG.replace("driver = \"-0.05*y\"", "driver = \"0\""),
        )
        .unwrap();
        let tr = transform_lambda(&zero_f, 1.0);
        for (t, y) in [(0.0, 0.7), (0.4, -1.2), (1.0, 2.5)] {
            let got = tr.driver_value(t, &[1.0], y, &[0.3], None).unwrap();
            assert!(
                (got - (-y)).abs() < 1e-12,
                "transformed zero driver at t={t}: {got} vs {}",
                -y
            );
        }
        // terminal scaled by e^{λT}, cost by e^{λt}
        let psi = tr.terminal_value(&[0.4]).unwrap();
        assert!((psi - 1.0f64.exp() * 0.6).abs() < 1e-12);
        let cost_at = tr.cost_value(0.5, &[1.0], &[0.0]).unwrap();
        assert!((cost_at - 0.5f64.exp() * 0.1).abs() < 1e-12);
    }

    #[test]
    fn lambda_metamorphic_invariance_holds_on_the_catalog() {
        let spec = load_spec(crate::model::tests::PUT_CATALOG).unwrap();
        let fd = FdSection::default();
        let lambda = 0.5;
        // scaling is a property of the true solution, not of the artificial
        // Dirichlet freeze, so probe well inside the box where the boundary
        // layer has died out
        let probes = [0.6, 1.0, 1.4, 1.8, 2.2];

        // self-convergence estimate at the probes
        let coarse = FdGrid::new(vec![-1.5], vec![3.5], vec![101], 50).unwrap();
        let fine = FdGrid::new(vec![-1.5], vec![3.5], vec![201], 100).unwrap();
        let v_coarse = fd_solve_local_qvi(&spec, &coarse, &fd, None).unwrap();
        let v_fine = fd_solve_local_qvi(&spec, &fine, &fd, None).unwrap();
        let mut self_err = 0.0f64;
        for s in 0..=50 {
            let t = v_coarse.value.times()[s];
            for &x in &probes {
                self_err =
                    self_err.max((v_coarse.value.eval(t, &[x]) - v_fine.value.eval(t, &[x])).abs());
            }
        }

        let transformed = transform_lambda(&spec, lambda);
        let v_tr = fd_solve_local_qvi(&transformed, &coarse, &fd, None).unwrap();
        let mut diff = 0.0f64;
        for s in 0..=50 {
            let t = v_coarse.value.times()[s];
            let scale = (lambda * t).exp();
            for &x in &probes {
                diff = diff.max((v_tr.value.eval(t, &[x]) - scale * v_coarse.value.eval(t, &[x])).abs());
            }
        }
        assert!(
            diff <= 2.0 * self_err,
            "metamorphic gap {diff:.3e} above twice the self-convergence error {self_err:.3e}"
        );
    }
}
