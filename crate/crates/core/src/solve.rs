//! Value functions by backward semi-Lagrangian dynamic programming, plus
//! the two control surgeries: approximation by step controls and repair of
//! unbounded step controls by a time change.
//!
//! All three value problems share one engine:
//!
//! ```text
//! V(t_i, x) = min_u  stage(t_i, x, u) + V(t_{i+1}, foot(x, u))
//! ```
//!
//! where `V(t_{i+1}, ·)` is interpolated multilinearly. Feet outside the
//! space box are clamped onto it and charged `penalty·dt`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{macro_cell_cost, CellOptions, EffectiveLagrangianTable, MicroGrid};
use crate::env::EnvironmentHandle;
use crate::interp::{Axis, TensorGrid};
use crate::io::{axis_names, num, parse_num, read_document, write_document, Document};
use crate::model::ModelSpec;
use crate::{Error, Result, Vector};

/// Relative slack on the time-step condition and on breakpoint matching.
const REL_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_start: f64,
    /// Final time T.
    pub horizon: f64,
    pub dt: f64,
    /// `[lo, hi]` per space axis.
    pub space_box: Vec<[f64; 2]>,
    pub dx: f64,
    pub control_radius: f64,
    /// Control points per axis on `[−K, K]`.
    pub control_grid_n: usize,
}

impl GridSpec {
    pub fn dimension(&self) -> usize {
        self.space_box.len()
    }

    pub fn steps(&self) -> usize {
        ((self.horizon - self.t_start) / self.dt).round() as usize
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps() {
            self.horizon
        } else {
            self.t_start + k as f64 * self.dt
        }
    }

    pub fn axes(&self) -> Vec<Axis> {
        self.space_box
            .iter()
            .map(|b| Axis {
                min: b[0],
                max: b[1],
                n: ((b[1] - b[0]) / self.dx).round() as usize + 1,
            })
            .collect()
    }

    pub fn space(&self) -> TensorGrid {
        TensorGrid::new(self.axes())
    }

    pub fn node(&self, flat: usize) -> Vector {
        Vector::from_slice(&self.space().point(flat)).unwrap_or_default()
    }

    pub fn clamp(&self, x: Vector) -> (Vector, bool) {
        let mut y = x;
        let mut hit = false;
        for (k, b) in self.space_box.iter().enumerate() {
            if y.0[k] < b[0] {
                y.0[k] = b[0];
                hit = true;
            } else if y.0[k] > b[1] {
                y.0[k] = b[1];
                hit = true;
            }
        }
        (y, hit)
    }

    /// Control grid: `control_grid_n` points per axis on `[−K, K]`, kept
    /// inside the ball, in lexicographic order.
    pub fn controls(&self) -> Vec<Vector> {
        let k = self.control_radius;
        let n = self.control_grid_n;
        let pts: Vec<f64> = if n == 1 {
            vec![0.0]
        } else {
            (0..n).map(|i| -k + 2.0 * k * i as f64 / (n - 1) as f64).collect()
        };
        if self.dimension() == 1 {
            pts.iter().map(|&u| Vector::new1(u)).collect()
        } else {
            pts.iter()
                .flat_map(|&a| pts.iter().map(move |&b| Vector::new2(a, b)))
                .filter(|u| u.norm() <= k * (1.0 + 1e-12))
                .collect()
        }
    }

    /// Checks everything but the time-step condition.
    pub fn validate_shape(&self, dim: usize) -> Result<()> {
        if self.dimension() != dim {
            return Err(Error::config("grid.space_box", "must have one interval per dimension"));
        }
        if !(self.horizon > self.t_start) {
            return Err(Error::config("grid.horizon", "must exceed t_start"));
        }
        if !(self.dt > 0.0 && self.dx > 0.0) {
            return Err(Error::config("grid", "dt and dx must be positive"));
        }
        let steps = (self.horizon - self.t_start) / self.dt;
        if (steps - steps.round()).abs() > REL_SLACK * steps.max(1.0) || steps.round() < 1.0 {
            return Err(Error::config("grid.dt", "must divide the time horizon"));
        }
        for b in &self.space_box {
            if !(b[1] > b[0]) {
                return Err(Error::config("grid.space_box", "needs lo < hi"));
            }
            let cells = (b[1] - b[0]) / self.dx;
            if (cells - cells.round()).abs() > REL_SLACK * cells.max(1.0) {
                return Err(Error::config("grid.dx", "must divide the space box"));
            }
        }
        if !(self.control_radius >= 0.0) || self.control_grid_n == 0 {
            return Err(Error::config("grid.control", "needs a non-negative radius and at least one point"));
        }
        Ok(())
    }

    /// Full validation: shape plus `dt ≤ dx / f*(K)`.
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        self.validate_shape(model.dimension)?;
        let fs = model.f_star(self.control_radius);
        if self.dt * fs > self.dx * (1.0 + REL_SLACK) {
            return Err(Error::config(
                "grid.dt",
                format!("dt·f*(K) = {} exceeds dx = {}", self.dt * fs, self.dx),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueKind {
    Fine { eps: f64 },
    Macro { tau: f64, eps: f64 },
    Homogenized,
    Hjb,
}

/// Value function on `(time slice, space node)`, slice-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub grid: GridSpec,
    pub kind: ValueKind,
    pub values: Vec<f64>,
    /// Minimising control per node for slices `0..steps` (empty for HJB).
    pub policy: Vec<Vector>,
    /// Number of argmin choices whose foot was clamped onto the box.
    pub boundary_hits: usize,
}

impl ValueField {
    pub fn nodes(&self) -> usize {
        self.grid.space().len()
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.nodes();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn policy_slice(&self, k: usize) -> &[Vector] {
        let n = self.nodes();
        &self.policy[k * n..(k + 1) * n]
    }

    /// Multilinear interpolation in `(t, x)`.
    pub fn value(&self, t: f64, x: Vector) -> Result<f64> {
        let steps = self.grid.steps();
        let mut axes = vec![Axis {
            min: self.grid.t_start,
            max: self.grid.horizon,
            n: steps + 1,
        }];
        axes.extend(self.grid.axes());
        let g = TensorGrid::new(axes);
        let mut q = vec![t];
        q.extend_from_slice(x.components(self.grid.dimension()));
        g.interpolate(&self.values, &q)
            .ok_or_else(|| Error::Extrapolation(format!("(t, x) = ({t}, {x:?}) is outside the value grid")))
    }

    /// Largest `|V(t, x) − V(t, x')| / dx` between neighbouring nodes.
    pub fn lipschitz_quotient(&self) -> f64 {
        let g = self.grid.space();
        let n = g.len();
        let mut worst: f64 = 0.0;
        for k in 0..=self.grid.steps() {
            let s = self.slice(k);
            for flat in 0..n {
                let idx = g.unflatten(flat);
                for (ax, a) in g.axes.iter().enumerate() {
                    if idx[ax] + 1 < a.n {
                        let mut j = idx.clone();
                        j[ax] += 1;
                        worst = worst.max((s[g.flatten(&j)] - s[flat]).abs() / a.step());
                    }
                }
            }
        }
        worst
    }

    pub fn to_csv(&self) -> Result<String> {
        let d = self.grid.dimension();
        let mut cols = vec!["t".to_string()];
        cols.extend(axis_names("x", d));
        cols.push("V".into());
        cols.extend(axis_names("policy", d));
        let g = self.grid.space();
        let n = g.len();
        let steps = self.grid.steps();
        let mut rows = Vec::with_capacity((steps + 1) * n);
        for k in 0..=steps {
            let t = self.grid.time(k);
            for flat in 0..n {
                let mut r = vec![num(t)];
                r.extend(g.point(flat).into_iter().map(num));
                r.push(num(self.values[k * n + flat]));
                let p = self.policy.get(k * n + flat).copied();
                for ax in 0..d {
                    r.push(p.map(|p| num(p[ax])).unwrap_or_default());
                }
                rows.push(r);
            }
        }
        #[derive(Serialize)]
        struct Head<'a> {
            grid: &'a GridSpec,
            value_kind: ValueKind,
            boundary_hits: usize,
        }
        write_document(
            "value_field",
            &Head {
                grid: &self.grid,
                value_kind: self.kind,
                boundary_hits: self.boundary_hits,
            },
            &cols,
            &rows,
        )
    }

    pub fn from_csv(text: &str) -> Result<ValueField> {
        #[derive(Deserialize)]
        struct Head {
            grid: GridSpec,
            value_kind: ValueKind,
            boundary_hits: usize,
        }
        let doc: Document<Head> = read_document("value_field", text)?;
        let grid = doc.header.grid;
        let d = grid.dimension();
        let n = grid.space().len();
        let steps = grid.steps();
        if doc.rows.len() != (steps + 1) * n {
            return Err(Error::Format("value field row count does not match its grid".into()));
        }
        let mut values = Vec::with_capacity(doc.rows.len());
        let mut policy = Vec::new();
        for (i, r) in doc.rows.iter().enumerate() {
            if r.len() != 2 + 2 * d {
                return Err(Error::Format("value field row has the wrong number of fields".into()));
            }
            values.push(parse_num(&r[1 + d])?);
            if i < steps * n && !r[2 + d].is_empty() {
                let c = r[2 + d..].iter().map(|s| parse_num(s)).collect::<Result<Vec<_>>>()?;
                policy.push(Vector::from_slice(&c).unwrap_or_default());
            }
        }
        Ok(ValueField {
            grid,
            kind: doc.header.value_kind,
            values,
            policy,
            boundary_hits: doc.header.boundary_hits,
        })
    }
}

/// Supremum of `|a − b|` over the slices of `a` and the nodes of `a` inside
/// `compact` (per-axis `[lo, hi]`), with `b` interpolated.
pub fn sup_gap(a: &ValueField, b: &ValueField, compact: &[[f64; 2]]) -> Result<f64> {
    let g = a.grid.space();
    let mut worst: f64 = 0.0;
    for k in 0..=a.grid.steps() {
        let t = a.grid.time(k);
        let s = a.slice(k);
        for flat in 0..g.len() {
            let x = a.grid.node(flat);
            if compact.iter().enumerate().all(|(ax, c)| x[ax] >= c[0] - 1e-12 && x[ax] <= c[1] + 1e-12) {
                worst = worst.max((s[flat] - b.value(t, x)?).abs());
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Engine

/// Stage cost and foot of one control, `None` when the control is not
/// available at this node.
type Stage<'a> = dyn Fn(usize, f64, Vector, Vector) -> Result<Option<(f64, Vector)>> + Sync + 'a;

fn backward(
    grid: &GridSpec,
    kind: ValueKind,
    terminal: &[f64],
    controls: &[Vector],
    penalty_rate: f64,
    stage: &Stage,
) -> Result<ValueField> {
    let space = grid.space();
    let n = space.len();
    if terminal.len() != n {
        return Err(Error::Domain("terminal data does not match the space grid".into()));
    }
    let steps = grid.steps();
    let mut values = vec![0.0; (steps + 1) * n];
    let mut policy = vec![Vector::ZERO; steps * n];
    values[steps * n..].copy_from_slice(terminal);
    let mut hits = 0usize;
    for k in (0..steps).rev() {
        let t = grid.time(k);
        let (done, next) = values.split_at_mut((k + 1) * n);
        let next = &next[..n];
        let out: Vec<Result<(f64, Vector, bool)>> = (0..n)
            .into_par_iter()
            .map(|flat| {
                let x = Vector::from_slice(&space.point(flat)).unwrap_or_default();
                let mut best = (f64::INFINITY, Vector::ZERO, false);
                for &u in controls {
                    let Some((cost, foot)) = stage(k, t, x, u)? else {
                        continue;
                    };
                    let (foot, hit) = grid.clamp(foot);
                    let mut cost = cost;
                    if hit {
                        cost += penalty_rate * grid.dt;
                    }
                    let q = foot.components(grid.dimension());
                    let w = space.interpolate(next, q).unwrap_or(f64::INFINITY);
                    let cand = cost + w;
                    if cand < best.0 {
                        best = (cand, u, hit);
                    }
                }
                if best.0.is_finite() {
                    Ok(best)
                } else {
                    Err(Error::Infeasible(format!("no admissible control at t = {t}, x = {x:?}")))
                }
            })
            .collect();
        for (flat, r) in out.into_iter().enumerate() {
            let (v, u, hit) = r?;
            done[k * n + flat] = v;
            policy[k * n + flat] = u;
            hits += hit as usize;
        }
    }
    Ok(ValueField {
        grid: grid.clone(),
        kind,
        values,
        policy,
        boundary_hits: hits,
    })
}

fn psi_nodes(model: &ModelSpec, grid: &GridSpec) -> Vec<f64> {
    let n = grid.space().len();
    (0..n).map(|i| model.psi(grid.node(i))).collect()
}

/// `dt·L(t, x, x/ε, u)` with the fast potential averaged along the step by
/// Simpson's rule, and the Euler foot `x + dt·f(x, u)`.
pub fn fine_stage(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    eps: f64,
    dt: f64,
    t: f64,
    x: Vector,
    u: Vector,
) -> (f64, Vector) {
    let v = model.eval_f(x, u);
    let foot = x + v * dt;
    let mid = x + v * (0.5 * dt);
    let inv = 1.0 / eps;
    let pot = (env.evaluate(x * inv) + 4.0 * env.evaluate(mid * inv) + env.evaluate(foot * inv)) / 6.0;
    let lag = &model.lagrangian;
    (dt * (lag.macro_term.eval(t, x) + pot + lag.running_cost.eval(u)), foot)
}

/// `V_ε`: the oscillating problem at scale ε.
pub fn solve_fine(model: &ModelSpec, env: &EnvironmentHandle, eps: f64, grid: &GridSpec) -> Result<ValueField> {
    solve_fine_from(model, env, eps, grid, &psi_nodes(model, grid))
}

/// [`solve_fine`] with explicit data on the last slice.
pub fn solve_fine_from(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    eps: f64,
    grid: &GridSpec,
    terminal: &[f64],
) -> Result<ValueField> {
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    grid.validate(model)?;
    let penalty = model.l_upper(env, grid.control_radius);
    let dt = grid.dt;
    let stage = |_k: usize, t: f64, x: Vector, u: Vector| Ok(Some(fine_stage(model, env, eps, dt, t, x, u)));
    backward(grid, ValueKind::Fine { eps }, terminal, &grid.controls(), penalty, &stage)
}

/// Source of macro-step cell costs `L_{τ,ε}(t, x, ũ)`; `None` marks an
/// infeasible control.
pub trait CellCosts: Sync {
    fn cell_cost(&self, t: f64, x: Vector, u: Vector) -> Result<Option<f64>>;
}

impl<F> CellCosts for F
where
    F: Fn(f64, Vector, Vector) -> Option<f64> + Sync,
{
    fn cell_cost(&self, t: f64, x: Vector, u: Vector) -> Result<Option<f64>> {
        Ok(self(t, x, u))
    }
}

/// Cell costs computed on demand by the cell solver.
pub struct OnDemandCellCosts<'a> {
    pub model: &'a ModelSpec,
    pub env: &'a EnvironmentHandle,
    pub eps: f64,
    pub tau: f64,
    pub micro: MicroGrid,
}

impl CellCosts for OnDemandCellCosts<'_> {
    fn cell_cost(&self, t: f64, x: Vector, u: Vector) -> Result<Option<f64>> {
        match macro_cell_cost(self.model, self.env, t, x, u, self.tau, self.eps, &self.micro, CellOptions::fast()) {
            Ok(r) => Ok(Some(r.value)),
            Err(Error::Infeasible(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// `V_{τ,ε}`: macro steps of length `grid.dt = τ` with cell costs.
pub fn solve_macro(model: &ModelSpec, costs: &dyn CellCosts, grid: &GridSpec, eps: f64) -> Result<ValueField> {
    grid.validate(model)?;
    let tau = grid.dt;
    let stage = |_k: usize, t: f64, x: Vector, u: Vector| -> Result<Option<(f64, Vector)>> {
        Ok(costs.cell_cost(t, x, u)?.map(|c| (c, x + model.eval_f(x, u) * tau)))
    };
    // Clamped feet pay the largest cost any control pays per unit time.
    let penalty = macro_penalty(model, grid);
    backward(grid, ValueKind::Macro { tau, eps }, &psi_nodes(model, grid), &grid.controls(), penalty, &stage)
}

fn macro_penalty(model: &ModelSpec, grid: &GridSpec) -> f64 {
    let k = grid.control_radius;
    let (_, m_hi) = model.lagrangian.macro_term.bounds(model.horizon, model.dimension);
    m_hi.abs() + model.lagrangian.running_cost.eval_radius(k).abs()
}

/// `Ṽ`: the same recursion with stage cost `dt·L̃(t, x, u)`.
pub fn solve_homogenized(model: &ModelSpec, table: &EffectiveLagrangianTable, grid: &GridSpec) -> Result<ValueField> {
    solve_homogenized_from(model, table, grid, &psi_nodes(model, grid))
}

pub fn solve_homogenized_from(
    model: &ModelSpec,
    table: &EffectiveLagrangianTable,
    grid: &GridSpec,
    terminal: &[f64],
) -> Result<ValueField> {
    grid.validate(model)?;
    let dt = grid.dt;
    let stage = |_k: usize, t: f64, x: Vector, u: Vector| -> Result<Option<(f64, Vector)>> {
        match table.value(t, x, u) {
            Ok(l) => Ok(Some((dt * l, x + model.eval_f(x, u) * dt))),
            Err(Error::Extrapolation(m)) if m.contains("infeasible") => Ok(None),
            Err(e) => Err(e),
        }
    };
    let penalty = table.values.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, v| a.max(v.abs()));
    backward(grid, ValueKind::Homogenized, terminal, &grid.controls(), penalty, &stage)
}

/// Bound on `|V_{τ,ε} − V_ε|` from the macro-step analysis, with `K*` the
/// truncation radius.
pub fn macro_gap_bound(model: &ModelSpec, tau: f64, k_star: f64) -> f64 {
    let t = model.horizon;
    let r = k_star + model.dynamics.eta(k_star);
    let fs = model.f_star(k_star);
    t * tau * (model.lip_l_t() + fs * model.lip_l_u(r) * model.dynamics.lip_h(r)) + t * model.m_l(tau * fs)
}

/// Soft bound on the spatial Lipschitz quotient of `V_ε`, uniform in ε:
/// reach a neighbouring point at speed δ with controls bounded by M, then
/// follow its optimal control with a delay.
pub fn value_lipschitz_bound(model: &ModelSpec, env: &EnvironmentHandle, k: f64) -> f64 {
    let delta = model.dynamics.delta();
    let m = model.dynamics.control_bound();
    (model.l_upper(env, m) + model.l_upper(env, k)) / delta
        + model.horizon * model.lip_l_t() / delta
        + model.lagrangian.terminal.lipschitz()
}

// ---------------------------------------------------------------------------
// Step controls

/// Piecewise-constant control: `values[i]` on `[breakpoints[i], breakpoints[i+1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    pub breakpoints: Vec<f64>,
    pub values: Vec<Vector>,
}

impl StepControl {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vector>) -> Result<Self> {
        let s = StepControl { breakpoints, values };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.len() != self.values.len() + 1 || self.values.is_empty() {
            return Err(Error::Domain("a step control needs one more breakpoint than values".into()));
        }
        if self.breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("breakpoints must increase strictly".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end(&self) -> f64 {
        *self.breakpoints.last().unwrap_or(&0.0)
    }

    pub fn len(&self, i: usize) -> f64 {
        self.breakpoints[i + 1] - self.breakpoints[i]
    }

    pub fn at(&self, t: f64) -> Vector {
        let i = self.breakpoints.partition_point(|&b| b <= t).saturating_sub(1);
        self.values[i.min(self.values.len() - 1)]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|u| u.norm()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self, dim: usize) -> Result<String> {
        crate::io::controls_to_csv(&self.breakpoints, &self.values, dim)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (b, v) = crate::io::controls_from_csv(text)?;
        StepControl::new(b, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEvaluation {
    /// Running cost plus terminal cost.
    pub total: f64,
    pub running: f64,
    pub endpoint: Vector,
}

fn rk4(model: &ModelSpec, x: Vector, u: Vector, h: f64) -> Vector {
    let k1 = model.eval_f(x, u);
    let k2 = model.eval_f(x + k1 * (0.5 * h), u);
    let k3 = model.eval_f(x + k2 * (0.5 * h), u);
    let k4 = model.eval_f(x + k3 * h, u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// `J` of a step control from `(t, x)` to the control's end time:
/// RK4 trajectory and Simpson quadrature on substeps of at most
/// `max_substep`; ψ is added at the end.
pub fn evaluate_cost(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    eps: f64,
    x: Vector,
    u: &StepControl,
    max_substep: f64,
) -> Result<CostEvaluation> {
    u.validate()?;
    if !(eps > 0.0 && max_substep > 0.0) {
        return Err(Error::Domain("ε and the substep must be positive".into()));
    }
    let inv = 1.0 / eps;
    let lag = |t: f64, x: Vector, c: Vector| model.eval_l(env, t, x, x * inv, c);
    let mut state = x;
    let mut running = 0.0;
    for (i, &c) in u.values.iter().enumerate() {
        let (a, b) = (u.breakpoints[i], u.breakpoints[i + 1]);
        let m = ((b - a) / max_substep).ceil().max(1.0) as usize;
        let h = (b - a) / m as f64;
        for j in 0..m {
            let s = a + j as f64 * h;
            let mid = rk4(model, state, c, 0.5 * h);
            let end = rk4(model, mid, c, 0.5 * h);
            running += h / 6.0 * (lag(s, state, c) + 4.0 * lag(s + 0.5 * h, mid, c) + lag(s + h, end, c));
            state = end;
        }
    }
    Ok(CostEvaluation {
        total: running + model.psi(state),
        running,
        endpoint: state,
    })
}

/// Rolls the stored feedback policy forward from `(t_start, x)`, taking the
/// control of the nearest node at each slice.
pub fn rollout_policy(field: &ValueField, model: &ModelSpec, x: Vector) -> Result<StepControl> {
    if field.policy.is_empty() {
        return Err(Error::Domain("value field carries no policy".into()));
    }
    let g = field.grid.space();
    let steps = field.grid.steps();
    let mut state = x;
    let mut breaks = Vec::with_capacity(steps + 1);
    let mut vals = Vec::with_capacity(steps);
    for k in 0..steps {
        let idx: Vec<usize> = g
            .axes
            .iter()
            .enumerate()
            .map(|(ax, a)| a.nearest(state[ax]))
            .collect();
        let u = field.policy_slice(k)[g.flatten(&idx)];
        breaks.push(field.grid.time(k));
        vals.push(u);
        state = field.grid.clamp(rk4(model, state, u, field.grid.dt)).0;
    }
    breaks.push(field.grid.horizon);
    StepControl::new(breaks, vals)
}

/// Control input of [`approximate_by_step_control`].
pub enum ControlInput<'a> {
    Step(&'a StepControl),
    Path {
        t0: f64,
        t1: f64,
        u: &'a (dyn Fn(f64) -> Vector + Sync),
    },
}

/// Samples per interval used to measure averages and oscillation.
const PATH_SAMPLES: usize = 32;

/// Step control whose interval velocities are the averages of `f(x, u(r))`
/// over dyadic intervals of length at most κ, refined until the control
/// oscillates by at most λ on each interval. Step controls pass through.
pub fn approximate_by_step_control(model: &ModelSpec, x: Vector, u: ControlInput, kappa: f64) -> Result<StepControl> {
    let (t0, t1, path) = match u {
        ControlInput::Step(s) => return Ok(s.clone()),
        ControlInput::Path { t0, t1, u } => (t0, t1, u),
    };
    if !(kappa > 0.0 && t1 > t0) {
        return Err(Error::Domain("need κ > 0 and t1 > t0".into()));
    }
    let lambda = model.lagrangian.lambda;
    let mut n = 1usize;
    while (t1 - t0) / n as f64 > kappa {
        n *= 2;
    }
    let oscillation = |a: f64, b: f64| {
        let pts: Vec<Vector> = (0..=PATH_SAMPLES)
            .map(|j| path(a + (b - a) * j as f64 / PATH_SAMPLES as f64))
            .collect();
        let mut worst: f64 = 0.0;
        for p in &pts {
            for q in &pts {
                worst = worst.max((*p - *q).norm());
            }
        }
        worst
    };
    loop {
        let h = (t1 - t0) / n as f64;
        if n >= 1 << 20 || (0..n).all(|i| oscillation(t0 + i as f64 * h, t0 + (i + 1) as f64 * h) <= lambda) {
            break;
        }
        n *= 2;
    }
    let h = (t1 - t0) / n as f64;
    let mut state = x;
    let mut breaks = Vec::with_capacity(n + 1);
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        let a = t0 + i as f64 * h;
        // Midpoint-rule mean velocity along the original trajectory.
        let mut v = Vector::ZERO;
        let mut y = state;
        let sub = h / PATH_SAMPLES as f64;
        for j in 0..PATH_SAMPLES {
            let c = path(a + (j as f64 + 0.5) * sub);
            v += model.eval_f(y, c) * (1.0 / PATH_SAMPLES as f64);
            y = rk4(model, y, c, sub);
        }
        let seed = path(a + 0.5 * h);
        let c = model.invert_dynamics(state, seed, v).unwrap_or(seed);
        breaks.push(a);
        vals.push(c);
        state = rk4(model, state, c, h);
    }
    breaks.push(t1);
    StepControl::new(breaks, vals)
}

/// Cost-difference bound for step approximations of a control bounded by
/// `r`, at oscillation scale ε.
pub fn step_approximation_bound(model: &ModelSpec, env: &EnvironmentHandle, eps: f64, kappa: f64, r: f64) -> f64 {
    let t = model.horizon;
    let arg = kappa * (t + 1.0) * (model.dynamics.lip_f(r) * (t + 1.0)).exp();
    t * model.m_l_at_scale(env, eps, arg) + kappa * t * model.lip_l_u(r) + kappa * model.l_upper(env, r)
}

// ---------------------------------------------------------------------------
// Bounded-control repair

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairParams {
    /// Target bound R.
    pub r: f64,
    /// Level N below which intervals may be sped up.
    pub n: f64,
    /// Measured cost rate W = cost / duration.
    pub w: f64,
    /// Largest time-change rate used.
    pub beta: f64,
    /// Oscillation bound λ.
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub control: StepControl,
    pub params: RepairParams,
    pub iterations: usize,
    pub cost_before: f64,
    pub cost_after: f64,
}

/// Replaces every interval whose control exceeds `r` by motion at speed δ
/// in the same direction, and buys the extra time by uniformly speeding up
/// the intervals whose controls stay below the level N. The time change
/// keeps every displacement, hence the endpoint, for x-independent
/// dynamics. Intervals are repaired from the last one backwards, one per
/// iteration.
pub fn repair_control(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    eps: f64,
    x: Vector,
    u: &StepControl,
    r: f64,
    max_substep: f64,
) -> Result<RepairOutcome> {
    u.validate()?;
    if !model.dynamics.is_x_independent() {
        return Err(Error::Domain("control repair needs x-independent dynamics".into()));
    }
    let duration = u.end() - u.start();
    let before = evaluate_cost(model, env, eps, x, u, max_substep)?;
    let w = before.running / duration;
    let th = model.control_threshold(env, w, duration, 1.0)?;
    if r < th.r {
        return Err(Error::RepairThreshold { given: r, required: th.r });
    }
    let mut params = RepairParams {
        r,
        n: th.n,
        w,
        beta: 0.0,
        lambda: model.lagrangian.lambda,
    };
    let delta = model.dynamics.delta();
    let m = model.dynamics.control_bound();
    let bound = |c: Vector| c.norm() <= r * (1.0 + 1e-12);
    let mut lens: Vec<f64> = (0..u.values.len()).map(|i| u.len(i)).collect();
    let mut vals = u.values.clone();
    let mut repaired = vec![false; vals.len()];
    let mut iterations = 0;
    while let Some(j) = (0..vals.len()).rev().find(|&j| !bound(vals[j])) {
        iterations += 1;
        let v = model.eval_f(x, vals[j]);
        let speed = v.norm();
        if speed <= delta {
            // Same velocity from inside the flexibility ball.
            vals[j] = model.dynamics.inverse_near(x, model.zero_control(x)?, v, model.dimension)?;
            if vals[j].norm() > m * (1.0 + 1e-9) {
                return Err(Error::ModelContract(format!("velocity {v:?} needs a control above M")));
            }
            repaired[j] = true;
            continue;
        }
        let cheap: Vec<usize> = (0..vals.len())
            .filter(|&i| i != j && !repaired[i] && vals[i].norm() <= th.n)
            .collect();
        let zeta: f64 = cheap.iter().map(|&i| lens[i]).sum();
        let extra = lens[j] * (speed / delta - 1.0);
        let beta = if zeta > 0.0 { extra / zeta } else { f64::INFINITY };
        if !(beta < 1.0) {
            return Err(Error::RepairThreshold { given: r, required: f64::INFINITY });
        }
        params.beta = params.beta.max(beta);
        for &i in &cheap {
            let vi = model.eval_f(x, vals[i]) * (1.0 / (1.0 - beta));
            vals[i] = model.dynamics.inverse_near(x, vals[i], vi, model.dimension)?;
            lens[i] *= 1.0 - beta;
        }
        vals[j] = model.direction_control(x, v * (1.0 / speed))?;
        lens[j] *= speed / delta;
        repaired[j] = true;
    }
    let mut breaks = Vec::with_capacity(lens.len() + 1);
    let mut t = u.start();
    breaks.push(t);
    for l in &lens {
        t += l;
        breaks.push(t);
    }
    // Keep the end time bit-exact.
    *breaks.last_mut().unwrap_or(&mut t) = u.end();
    let control = StepControl::new(breaks, vals)?;
    if !bound(Vector::new1(control.sup_norm())) {
        return Err(Error::RepairThreshold { given: r, required: th.r.max(control.sup_norm()) });
    }
    let after = evaluate_cost(model, env, eps, x, &control, max_substep)?;
    Ok(RepairOutcome {
        control,
        params,
        iterations,
        cost_before: before.running,
        cost_after: after.running,
    })
}
