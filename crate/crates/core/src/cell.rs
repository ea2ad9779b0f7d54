//! Cell problems: endpoint-constrained minimal cost over a fast horizon.
//!
//! In fast variables (time `s`, position `y`) with frozen `(t0, x0)`:
//!
//! ```text
//! F_{a,b} = min ∫_a^b L(t0, x0, y(s), u(s)) ds
//!           y' = f(x0, u),  y(a) = o + a·f(x0, ũ),  y(b) = o + b·f(x0, ũ)
//! L̃(t0, x0, ũ) = lim_{b→∞} F_{0,b} / b
//! L_{τ,ε}      = ε F_{0,τ/ε}   with o = x0/ε
//! ```
//!
//! The state lives on the lattice `h·Z^d`. A step of length `dt` moves by a
//! whole number of lattice cells, so each transition has the exact velocity
//! `j·h/dt`, realised by the control `H(x0, j·h/dt)`. The endpoint is the
//! lattice point nearest to the exact target and is imposed exactly.
//!
//! The potential is integrated along each step: in 1-D by the trapezoid rule
//! over the lattice points the step crosses, in 2-D by Simpson's rule on the
//! segment. Both only read the field at absolute lattice (or half-lattice)
//! coordinates, so shifting the environment by a lattice vector shifts every
//! stage cost exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::EnvironmentHandle;
use crate::interp::{Axis, TensorGrid};
use crate::model::ModelSpec;
use crate::{Error, Result, Vector};

/// Floor/ceil slack when converting continuous tube bounds to indices.
const INDEX_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointMode {
    /// Terminal indicator: 0 at the snapped target, +∞ elsewhere.
    #[default]
    Hard,
    /// Quadratic penalty `weight·|y − target|²` (diagnostics only).
    Penalty { weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellProblemSpec {
    pub t0: f64,
    pub x0: Vector,
    pub u_tilde: Vector,
    /// Fast horizon b.
    pub horizon_b: f64,
    pub micro_dt: f64,
    pub micro_lattice: f64,
    pub control_radius: f64,
    /// Cap on velocities per axis; `None` keeps every lattice velocity
    /// whose control lies within `control_radius`.
    #[serde(default)]
    pub control_grid_n: Option<usize>,
    /// Fast position corresponding to `x0`; defaults to `x0` itself.
    #[serde(default)]
    pub fast_origin: Option<Vector>,
    /// Half-width (sup norm) of the band around the straight line that
    /// admissible paths must stay in. `None` keeps only the speed bound.
    #[serde(default)]
    pub tube_halfwidth: Option<f64>,
    #[serde(default)]
    pub endpoint: EndpointMode,
}

impl CellProblemSpec {
    pub fn new(t0: f64, x0: Vector, u_tilde: Vector, micro: &MicroGrid, horizon_b: f64) -> Self {
        CellProblemSpec {
            t0,
            x0,
            u_tilde,
            horizon_b,
            micro_dt: micro.micro_dt,
            micro_lattice: micro.micro_lattice,
            control_radius: micro.control_radius,
            control_grid_n: micro.control_grid_n,
            fast_origin: None,
            tube_halfwidth: micro.tube_halfwidth,
            endpoint: EndpointMode::Hard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.micro_dt > 0.0 && self.micro_dt.is_finite()) {
            return Err(Error::config("cell.micro_dt", "must be positive"));
        }
        if !(self.micro_lattice > 0.0 && self.micro_lattice.is_finite()) {
            return Err(Error::config("cell.micro_lattice", "must be positive"));
        }
        if !(self.control_radius >= self.u_tilde.norm()) {
            return Err(Error::config("cell.control_radius", "must be at least |ũ|"));
        }
        if !(self.horizon_b >= self.micro_dt * (1.0 - 1e-12)) {
            return Err(Error::config("cell.horizon_b", "must be at least micro_dt"));
        }
        if let Some(w) = self.tube_halfwidth {
            if !(w >= self.micro_lattice) {
                return Err(Error::config("cell.tube_halfwidth", "must be at least micro_lattice"));
            }
        }
        if let Some(n) = self.control_grid_n {
            if n < 1 {
                return Err(Error::config("cell.control_grid_n", "must be positive"));
            }
        }
        if let EndpointMode::Penalty { weight } = self.endpoint {
            if !(weight > 0.0) {
                return Err(Error::config("cell.endpoint.weight", "must be positive"));
            }
        }
        Ok(())
    }

    fn origin(&self) -> Vector {
        self.fast_origin.unwrap_or(self.x0)
    }
}

/// Micro-scale discretisation shared by all cell problems of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroGrid {
    pub micro_dt: f64,
    pub micro_lattice: f64,
    pub control_radius: f64,
    #[serde(default)]
    pub control_grid_n: Option<usize>,
    #[serde(default)]
    pub tube_halfwidth: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub time: f64,
    pub position: Vector,
    /// Control applied on the step starting here (repeated at the end).
    pub control: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub value: f64,
    /// Distance between the snapped and the exact target.
    pub endpoint_residual: f64,
    pub argmin_path: Vec<PathPoint>,
    pub dp_tolerance: f64,
    pub duration: f64,
    /// Velocity actually realised between the snapped endpoints.
    pub realized_velocity: Vector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellOptions {
    pub record_path: bool,
    /// Estimate `dp_tolerance` by re-solving with `dt/2` and `h/2`.
    pub richardson: bool,
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            record_path: true,
            richardson: true,
        }
    }
}

impl CellOptions {
    pub fn fast() -> Self {
        CellOptions {
            record_path: false,
            richardson: false,
        }
    }
}

/// A lattice velocity and the control realising it.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroControl {
    pub offset: [i64; 2],
    pub velocity: Vector,
    pub control: Vector,
    /// `dt·ℓ(control)` for the frozen problem.
    pub running: f64,
}

type Window = [(i64, i64); 2];

/// Resolved lattice geometry of one cell problem.
#[derive(Clone, Debug)]
struct Geometry {
    dim: usize,
    h: f64,
    dt: f64,
    steps: usize,
    /// Fast start time a.
    a: f64,
    fbar: Vector,
    origin: Vector,
    start: [i64; 2],
    target: [i64; 2],
    residual: f64,
    reach: [i64; 2],
    tube: Option<f64>,
    hard: bool,
}

impl Geometry {
    fn center(&self, k: usize, axis: usize) -> f64 {
        (self.origin[axis] + (self.a + k as f64 * self.dt) * self.fbar[axis]) / self.h
    }

    /// Admissible index box at step k, or `None` when empty.
    /// `to_target = false` drops the reach-the-target constraint.
    fn window(&self, k: usize, to_target: bool) -> Option<Window> {
        let mut w = [(0i64, 0i64); 2];
        for ax in 0..self.dim {
            let r = self.reach[ax];
            let mut lo = self.start[ax] - k as i64 * r;
            let mut hi = self.start[ax] + k as i64 * r;
            if to_target && self.hard {
                let left = (self.steps - k) as i64 * r;
                lo = lo.max(self.target[ax] - left);
                hi = hi.min(self.target[ax] + left);
            }
            if let Some(width) = self.tube {
                let c = self.center(k, ax);
                let half = width / self.h;
                lo = lo.max((c - half - INDEX_SLACK).ceil() as i64);
                hi = hi.min((c + half + INDEX_SLACK).floor() as i64);
            }
            if lo > hi {
                return None;
            }
            w[ax] = (lo, hi);
        }
        Some(w)
    }
}

fn window_len(w: &Window, dim: usize) -> usize {
    (0..dim).map(|a| (w[a].1 - w[a].0 + 1) as usize).product()
}

/// Stage costs of a cell problem, exposed so that independent oracles can
/// enumerate paths with the very same arithmetic.
pub struct CellStages<'a> {
    model: &'a ModelSpec,
    env: &'a EnvironmentHandle,
    geo: Geometry,
    controls: Vec<MicroControl>,
    t0: f64,
    x0: Vector,
    macro0: f64,
    /// Scale ε of the unfrozen problem; `None` for frozen coefficients.
    unfrozen: Option<f64>,
    control_radius: f64,
    /// Weight of the soft endpoint penalty; `None` for the hard constraint.
    penalty: Option<f64>,
}

impl<'a> CellStages<'a> {
    fn new(
        model: &'a ModelSpec,
        env: &'a EnvironmentHandle,
        spec: &CellProblemSpec,
        a: f64,
        b: f64,
        unfrozen: Option<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        if env.dimension() != model.dimension {
            return Err(Error::config("environment.dimension", "must match the model dimension"));
        }
        if !(0.0 <= a && a < b) {
            return Err(Error::Domain(format!("need 0 ≤ a < b, got a = {a}, b = {b}")));
        }
        let dim = model.dimension;
        let k_rad = spec.control_radius;
        let fbar = model.eval_f(spec.x0, spec.u_tilde);
        if fbar.norm() > model.f_star(k_rad) * (1.0 + 1e-12) {
            return Err(Error::Infeasible(format!(
                "|f(x0, ũ)| = {} exceeds f*(K) = {}",
                fbar.norm(),
                model.f_star(k_rad)
            )));
        }
        let duration = b - a;
        let steps = ((duration / spec.micro_dt).round() as usize).max(1);
        let dt = duration / steps as f64;
        let h = spec.micro_lattice;
        let origin = spec.origin();
        let mut start = [0i64; 2];
        let mut target = [0i64; 2];
        let mut residual_sq = 0.0;
        for ax in 0..dim {
            let ya = origin[ax] + a * fbar[ax];
            let yb = origin[ax] + b * fbar[ax];
            start[ax] = (ya / h).round() as i64;
            target[ax] = (yb / h).round() as i64;
            residual_sq += (target[ax] as f64 * h - yb).powi(2);
        }
        let mut j_max = (dt * model.f_star(k_rad) / h + INDEX_SLACK).floor() as i64;
        if let Some(n) = spec.control_grid_n {
            j_max = j_max.min(((n.max(1) - 1) / 2) as i64);
        }
        let controls = lattice_controls(model, spec.x0, spec.u_tilde, dim, j_max, h, dt, k_rad)?;
        let reach = [j_max, if dim == 2 { j_max } else { 0 }];
        let geo = Geometry {
            dim,
            h,
            dt,
            steps,
            a,
            fbar,
            origin,
            start,
            target,
            residual: residual_sq.sqrt(),
            reach,
            tube: spec.tube_halfwidth,
            hard: spec.endpoint == EndpointMode::Hard,
        };
        Ok(CellStages {
            model,
            env,
            macro0: model.lagrangian.macro_term.eval(spec.t0, spec.x0),
            geo,
            controls,
            t0: spec.t0,
            x0: spec.x0,
            unfrozen,
            control_radius: k_rad,
            penalty: match spec.endpoint {
                EndpointMode::Hard => None,
                EndpointMode::Penalty { weight } => Some(weight),
            },
        })
    }

    pub fn controls(&self) -> &[MicroControl] {
        &self.controls
    }

    pub fn steps(&self) -> usize {
        self.geo.steps
    }

    pub fn start_index(&self) -> [i64; 2] {
        self.geo.start
    }

    pub fn target_index(&self) -> [i64; 2] {
        self.geo.target
    }

    /// Whether `idx` is admissible at step `k` (tube and speed bounds).
    pub fn admissible(&self, k: usize, idx: [i64; 2]) -> bool {
        match self.geo.window(k, true) {
            Some(w) => (0..self.geo.dim).all(|a| idx[a] >= w[a].0 && idx[a] <= w[a].1),
            None => false,
        }
    }

    fn position(&self, idx: [i64; 2]) -> Vector {
        half_point(self.geo.dim, [2 * idx[0], 2 * idx[1]], self.geo.h)
    }

    fn macro_position(&self, idx: [i64; 2], eps: f64) -> Vector {
        self.x0 + (self.position(idx) - self.geo.origin) * eps
    }

    /// `dt·m(t, x)` on the step leaving `idx` at step `k`.
    fn macro_part(&self, k: usize, idx: [i64; 2]) -> f64 {
        match self.unfrozen {
            None => self.geo.dt * self.macro0,
            Some(eps) => {
                let s = self.geo.a + k as f64 * self.geo.dt;
                let t = self.t0 + eps * s;
                self.geo.dt * self.model.lagrangian.macro_term.eval(t, self.macro_position(idx, eps))
            }
        }
    }

    /// `dt·ℓ(u)` for control `c` leaving `idx`.
    fn running_part(&self, idx: [i64; 2], c: usize) -> f64 {
        match self.unfrozen {
            Some(eps) if !self.model.dynamics.is_x_independent() => {
                let x = self.macro_position(idx, eps);
                let mc = &self.controls[c];
                match self.model.dynamics.inverse_near(x, mc.control, mc.velocity, self.geo.dim) {
                    Ok(u) if u.norm() <= self.control_radius * (1.0 + 1e-12) => {
                        self.geo.dt * self.model.lagrangian.running_cost.eval(u)
                    }
                    _ => f64::INFINITY,
                }
            }
            _ => self.controls[c].running,
        }
    }

    /// Mean of the potential along the step from `idx` with control `c`.
    fn potential_mean(&self, idx: [i64; 2], c: usize) -> f64 {
        let off = self.controls[c].offset;
        let h = self.geo.h;
        if self.geo.dim == 1 {
            let j = off[0];
            let v = |i: i64| self.env.evaluate(Vector::new1(i as f64 * h));
            if j == 0 {
                return v(idx[0]);
            }
            let sgn = j.signum();
            let mut s = 0.0;
            for m in 1..=j.abs() {
                s += 0.5 * (v(idx[0] + sgn * (m - 1)) + v(idx[0] + sgn * m));
            }
            s / j.abs() as f64
        } else {
            let p0 = [2 * idx[0], 2 * idx[1]];
            let pm = [p0[0] + off[0], p0[1] + off[1]];
            let p1 = [p0[0] + 2 * off[0], p0[1] + 2 * off[1]];
            let v = |p: [i64; 2]| self.env.evaluate(half_point(2, p, h));
            (v(p0) + 4.0 * v(pm) + v(p1)) / 6.0
        }
    }

    /// Cost of the step leaving `idx` at step `k` with control `c`.
    pub fn stage(&self, k: usize, idx: [i64; 2], c: usize) -> f64 {
        (self.macro_part(k, idx) + self.geo.dt * self.potential_mean(idx, c)) + self.running_part(idx, c)
    }

    /// Terminal cost at `idx`.
    pub fn terminal(&self, idx: [i64; 2]) -> f64 {
        match self.endpoint_weight() {
            None => {
                if (0..self.geo.dim).all(|a| idx[a] == self.geo.target[a]) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Some(w) => {
                let d = self.position(idx) - self.position(self.geo.target);
                w * d.norm_sq()
            }
        }
    }

    fn endpoint_weight(&self) -> Option<f64> {
        self.penalty
    }
}

/// Point with half-lattice index `p`, i.e. coordinates `p·h/2`.
fn half_point(dim: usize, p: [i64; 2], h: f64) -> Vector {
    let hh = h * 0.5;
    if dim == 1 {
        Vector::new1(p[0] as f64 * hh)
    } else {
        Vector::new2(p[0] as f64 * hh, p[1] as f64 * hh)
    }
}

#[allow(clippy::too_many_arguments)]
fn lattice_controls(
    model: &ModelSpec,
    x0: Vector,
    u_tilde: Vector,
    dim: usize,
    j_max: i64,
    h: f64,
    dt: f64,
    radius: f64,
) -> Result<Vec<MicroControl>> {
    let mut out = Vec::new();
    let offsets: Vec<[i64; 2]> = if dim == 1 {
        (-j_max..=j_max).map(|j| [j, 0]).collect()
    } else {
        (-j_max..=j_max)
            .flat_map(|a| (-j_max..=j_max).map(move |b| [a, b]))
            .collect()
    };
    for off in offsets {
        let v = if dim == 1 {
            Vector::new1(off[0] as f64 * h / dt)
        } else {
            Vector::new2(off[0] as f64 * h / dt, off[1] as f64 * h / dt)
        };
        let u = match model.dynamics.inverse_near(x0, u_tilde, v, dim) {
            Ok(u) => u,
            Err(_) => continue,
        };
        if u.norm() > radius * (1.0 + 1e-12) {
            continue;
        }
        out.push(MicroControl {
            offset: off,
            velocity: v,
            control: u,
            running: dt * model.lagrangian.running_cost.eval(u),
        });
    }
    if out.is_empty() {
        return Err(Error::Infeasible("no lattice velocity is realisable within the control radius".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dynamic programming engines

struct BackwardOutput {
    value: f64,
    path: Vec<PathPoint>,
}

/// Lattice values of the potential over an index range, 1-D.
struct Line {
    lo: i64,
    vals: Vec<f64>,
}

impl Line {
    fn new(env: &EnvironmentHandle, lo: i64, hi: i64, h: f64) -> Self {
        Line {
            lo,
            vals: (lo..=hi).map(|i| env.evaluate(Vector::new1(i as f64 * h))).collect(),
        }
    }

    #[inline]
    fn at(&self, i: i64) -> f64 {
        self.vals[(i - self.lo) as usize]
    }
}

/// Half-lattice values of the potential over a rectangle, 2-D, filled from
/// a cache shared across steps.
struct Patch {
    x0: i64,
    y0: i64,
    ny: usize,
    vals: Vec<f64>,
}

impl Patch {
    fn new(
        env: &EnvironmentHandle,
        h: f64,
        xr: (i64, i64),
        yr: (i64, i64),
        cache: &mut std::collections::HashMap<(i64, i64), f64>,
    ) -> Self {
        let ny = (yr.1 - yr.0 + 1) as usize;
        let mut vals = Vec::with_capacity((xr.1 - xr.0 + 1) as usize * ny);
        for px in xr.0..=xr.1 {
            for py in yr.0..=yr.1 {
                let v = *cache
                    .entry((px, py))
                    .or_insert_with(|| env.evaluate(half_point(2, [px, py], h)));
                vals.push(v);
            }
        }
        Patch {
            x0: xr.0,
            y0: yr.0,
            ny,
            vals,
        }
    }

    #[inline]
    fn at(&self, px: i64, py: i64) -> f64 {
        self.vals[(px - self.x0) as usize * self.ny + (py - self.y0) as usize]
    }
}

/// Trapezoid means of the potential from `i` over `1..=m` cells in each
/// direction, accumulated in the same order as [`CellStages::stage`].
fn trapezoid_means(line: &Line, i: i64, up: i64, down: i64, pos: &mut [f64], neg: &mut [f64]) {
    let mut s = 0.0;
    for m in 1..=up {
        s += 0.5 * (line.at(i + (m - 1)) + line.at(i + m));
        pos[m as usize] = s / m as f64;
    }
    let mut s = 0.0;
    for m in 1..=down {
        s += 0.5 * (line.at(i - (m - 1)) + line.at(i - m));
        neg[m as usize] = s / m as f64;
    }
}

fn windows(st: &CellStages, steps: usize, to_target: bool) -> Result<Vec<Window>> {
    (0..=steps)
        .map(|k| st.geo.window(k, to_target))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Infeasible("the admissible tube is empty at some step".into()))
}

impl CellStages<'_> {
    fn backward(&self, record: bool) -> Result<BackwardOutput> {
        let wins = windows(self, self.geo.steps, true)?;
        if self.geo.dim == 1 {
            self.backward_1d(&wins, record)
        } else {
            self.backward_2d(&wins, record)
        }
    }

    fn terminal_values(&self, w: &Window) -> Vec<f64> {
        let mut out = Vec::with_capacity(window_len(w, self.geo.dim));
        if self.geo.dim == 1 {
            for i in w[0].0..=w[0].1 {
                out.push(self.terminal([i, 0]));
            }
        } else {
            for i in w[0].0..=w[0].1 {
                for j in w[1].0..=w[1].1 {
                    out.push(self.terminal([i, j]));
                }
            }
        }
        out
    }

    fn backward_1d(&self, wins: &[Window], record: bool) -> Result<BackwardOutput> {
        let n = self.geo.steps;
        let lo_all = wins.iter().map(|w| w[0].0).min().unwrap_or(0);
        let hi_all = wins.iter().map(|w| w[0].1).max().unwrap_or(0);
        let line = Line::new(self.env, lo_all, hi_all, self.geo.h);
        let jr = self.geo.reach[0];
        let mut pos = vec![0.0; jr as usize + 1];
        let mut neg = vec![0.0; jr as usize + 1];
        let dt = self.geo.dt;
        let mut next = self.terminal_values(&wins[n]);
        let mut args: Vec<Vec<u16>> = Vec::new();
        for k in (0..n).rev() {
            let (lo, hi) = wins[k][0];
            let (nlo, nhi) = wins[k + 1][0];
            let mut cur = vec![f64::INFINITY; (hi - lo + 1) as usize];
            let mut arg = vec![u16::MAX; if record { cur.len() } else { 0 }];
            for i in lo..=hi {
                let jl = (-jr).max(nlo - i);
                let jh = jr.min(nhi - i);
                if jl > jh {
                    continue;
                }
                trapezoid_means(&line, i, jh.max(0), (-jl).max(0), &mut pos, &mut neg);
                let mp = self.macro_part(k, [i, 0]);
                let mut best = f64::INFINITY;
                let mut best_c = u16::MAX;
                for (c, mc) in self.controls.iter().enumerate() {
                    let j = mc.offset[0];
                    if j < jl || j > jh {
                        continue;
                    }
                    let w = next[(i + j - nlo) as usize];
                    if w == f64::INFINITY {
                        continue;
                    }
                    let avg = match j.signum() {
                        0 => line.at(i),
                        1 => pos[j as usize],
                        _ => neg[(-j) as usize],
                    };
                    let stage = (mp + dt * avg) + self.running_part([i, 0], c);
                    let cand = stage + w;
                    if cand < best {
                        best = cand;
                        best_c = c as u16;
                    }
                }
                cur[(i - lo) as usize] = best;
                if record {
                    arg[(i - lo) as usize] = best_c;
                }
            }
            next = cur;
            if record {
                args.push(arg);
            }
        }
        let (lo0, _) = wins[0][0];
        let value = next[(self.geo.start[0] - lo0) as usize];
        let mut path = Vec::new();
        if record && value.is_finite() {
            args.reverse();
            let mut i = self.geo.start[0];
            for (k, arg) in args.iter().enumerate() {
                let c = arg[(i - wins[k][0].0) as usize] as usize;
                path.push(self.path_point(k, [i, 0], c));
                i += self.controls[c].offset[0];
            }
            path.push(self.path_end([i, 0]));
        }
        Ok(BackwardOutput { value, path })
    }

    fn backward_2d(&self, wins: &[Window], record: bool) -> Result<BackwardOutput> {
        let n = self.geo.steps;
        let dt = self.geo.dt;
        let mut cache = std::collections::HashMap::new();
        let mut next = self.terminal_values(&wins[n]);
        let mut args: Vec<Vec<u16>> = Vec::new();
        for k in (0..n).rev() {
            let w = wins[k];
            let nw = wins[k + 1];
            let ny_next = (nw[1].1 - nw[1].0 + 1) as usize;
            let patch = Patch::new(
                self.env,
                self.geo.h,
                (2 * w[0].0.min(nw[0].0), 2 * w[0].1.max(nw[0].1)),
                (2 * w[1].0.min(nw[1].0), 2 * w[1].1.max(nw[1].1)),
                &mut cache,
            );
            let len = window_len(&w, 2);
            let mut cur = vec![f64::INFINITY; len];
            let mut arg = vec![u16::MAX; if record { len } else { 0 }];
            let mut slot = 0;
            for i in w[0].0..=w[0].1 {
                for j in w[1].0..=w[1].1 {
                    let mp = self.macro_part(k, [i, j]);
                    let v0 = patch.at(2 * i, 2 * j);
                    let mut best = f64::INFINITY;
                    let mut best_c = u16::MAX;
                    for (c, mc) in self.controls.iter().enumerate() {
                        let (ti, tj) = (i + mc.offset[0], j + mc.offset[1]);
                        if ti < nw[0].0 || ti > nw[0].1 || tj < nw[1].0 || tj > nw[1].1 {
                            continue;
                        }
                        let wv = next[(ti - nw[0].0) as usize * ny_next + (tj - nw[1].0) as usize];
                        if wv == f64::INFINITY {
                            continue;
                        }
                        let vm = patch.at(2 * i + mc.offset[0], 2 * j + mc.offset[1]);
                        let v1 = patch.at(2 * ti, 2 * tj);
                        let avg = (v0 + 4.0 * vm + v1) / 6.0;
                        let stage = (mp + dt * avg) + self.running_part([i, j], c);
                        let cand = stage + wv;
                        if cand < best {
                            best = cand;
                            best_c = c as u16;
                        }
                    }
                    cur[slot] = best;
                    if record {
                        arg[slot] = best_c;
                    }
                    slot += 1;
                }
            }
            next = cur;
            if record {
                args.push(arg);
            }
        }
        let w0 = wins[0];
        let ny0 = (w0[1].1 - w0[1].0 + 1) as usize;
        let s = self.geo.start;
        let value = next[(s[0] - w0[0].0) as usize * ny0 + (s[1] - w0[1].0) as usize];
        let mut path = Vec::new();
        if record && value.is_finite() {
            args.reverse();
            let mut idx = s;
            for (k, arg) in args.iter().enumerate() {
                let w = wins[k];
                let ny = (w[1].1 - w[1].0 + 1) as usize;
                let c = arg[(idx[0] - w[0].0) as usize * ny + (idx[1] - w[1].0) as usize] as usize;
                path.push(self.path_point(k, idx, c));
                idx = [idx[0] + self.controls[c].offset[0], idx[1] + self.controls[c].offset[1]];
            }
            path.push(self.path_end(idx));
        }
        Ok(BackwardOutput { value, path })
    }

    fn path_point(&self, k: usize, idx: [i64; 2], c: usize) -> PathPoint {
        PathPoint {
            time: self.geo.a + k as f64 * self.geo.dt,
            position: self.position(idx),
            control: self.controls[c].control,
        }
    }

    fn path_end(&self, idx: [i64; 2]) -> PathPoint {
        PathPoint {
            time: self.geo.a + self.geo.steps as f64 * self.geo.dt,
            position: self.position(idx),
            control: Vector::ZERO,
        }
    }

    /// Forward minimal costs from the start, read at the snapped targets
    /// after `checkpoints[m]` steps. Same admissible set as the backward
    /// pass, summed left to right.
    fn forward(&self, checkpoints: &[(usize, [i64; 2])]) -> Result<Vec<f64>> {
        let n = checkpoints.iter().map(|c| c.0).max().unwrap_or(0);
        let wins = windows(self, n, false)?;
        let dim = self.geo.dim;
        let dt = self.geo.dt;
        let read = |vals: &[f64], w: &Window, idx: [i64; 2]| -> f64 {
            if (0..dim).any(|a| idx[a] < w[a].0 || idx[a] > w[a].1) {
                return f64::INFINITY;
            }
            let ny = if dim == 2 { (w[1].1 - w[1].0 + 1) as usize } else { 1 };
            let iy = if dim == 2 { (idx[1] - w[1].0) as usize } else { 0 };
            vals[(idx[0] - w[0].0) as usize * ny + iy]
        };
        let mut out = vec![f64::INFINITY; checkpoints.len()];
        let mut cur = vec![f64::INFINITY; window_len(&wins[0], dim)];
        {
            let s = self.geo.start;
            let w = &wins[0];
            let ny = if dim == 2 { (w[1].1 - w[1].0 + 1) as usize } else { 1 };
            let iy = if dim == 2 { (s[1] - w[1].0) as usize } else { 0 };
            cur[(s[0] - w[0].0) as usize * ny + iy] = 0.0;
        }
        let record = |k: usize, vals: &[f64], out: &mut Vec<f64>| {
            for (m, (steps, target)) in checkpoints.iter().enumerate() {
                if *steps == k {
                    out[m] = read(vals, &wins[k], *target);
                }
            }
        };
        record(0, &cur, &mut out);
        let jr = self.geo.reach[0];
        let mut pos = vec![0.0; jr as usize + 1];
        let mut neg = vec![0.0; jr as usize + 1];
        let mut cache = std::collections::HashMap::new();
        let line = if dim == 1 {
            let lo = wins.iter().map(|w| w[0].0).min().unwrap_or(0);
            let hi = wins.iter().map(|w| w[0].1).max().unwrap_or(0);
            Some(Line::new(self.env, lo, hi, self.geo.h))
        } else {
            None
        };
        for k in 0..n {
            let w = wins[k];
            let nw = wins[k + 1];
            let mut nxt = vec![f64::INFINITY; window_len(&nw, dim)];
            if let Some(line) = &line {
                let (lo, hi) = w[0];
                let (nlo, nhi) = nw[0];
                for i in lo..=hi {
                    let g = cur[(i - lo) as usize];
                    if g == f64::INFINITY {
                        continue;
                    }
                    let jl = (-jr).max(nlo - i);
                    let jh = jr.min(nhi - i);
                    if jl > jh {
                        continue;
                    }
                    trapezoid_means(line, i, jh.max(0), (-jl).max(0), &mut pos, &mut neg);
                    let mp = self.macro_part(k, [i, 0]);
                    for (c, mc) in self.controls.iter().enumerate() {
                        let j = mc.offset[0];
                        if j < jl || j > jh {
                            continue;
                        }
                        let avg = match j.signum() {
                            0 => line.at(i),
                            1 => pos[j as usize],
                            _ => neg[(-j) as usize],
                        };
                        let cand = g + ((mp + dt * avg) + self.running_part([i, 0], c));
                        let t = &mut nxt[(i + j - nlo) as usize];
                        if cand < *t {
                            *t = cand;
                        }
                    }
                }
            } else {
                let patch = Patch::new(
                    self.env,
                    self.geo.h,
                    (2 * w[0].0.min(nw[0].0), 2 * w[0].1.max(nw[0].1)),
                    (2 * w[1].0.min(nw[1].0), 2 * w[1].1.max(nw[1].1)),
                    &mut cache,
                );
                let ny = (w[1].1 - w[1].0 + 1) as usize;
                let nny = (nw[1].1 - nw[1].0 + 1) as usize;
                for i in w[0].0..=w[0].1 {
                    for j in w[1].0..=w[1].1 {
                        let g = cur[(i - w[0].0) as usize * ny + (j - w[1].0) as usize];
                        if g == f64::INFINITY {
                            continue;
                        }
                        let mp = self.macro_part(k, [i, j]);
                        let v0 = patch.at(2 * i, 2 * j);
                        for (c, mc) in self.controls.iter().enumerate() {
                            let (ti, tj) = (i + mc.offset[0], j + mc.offset[1]);
                            if ti < nw[0].0 || ti > nw[0].1 || tj < nw[1].0 || tj > nw[1].1 {
                                continue;
                            }
                            let vm = patch.at(2 * i + mc.offset[0], 2 * j + mc.offset[1]);
                            let v1 = patch.at(2 * ti, 2 * tj);
                            let avg = (v0 + 4.0 * vm + v1) / 6.0;
                            let cand = g + ((mp + dt * avg) + self.running_part([i, j], c));
                            let t = &mut nxt[(ti - nw[0].0) as usize * nny + (tj - nw[1].0) as usize];
                            if cand < *t {
                                *t = cand;
                            }
                        }
                    }
                }
            }
            cur = nxt;
            record(k + 1, &cur, &mut out);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Public operations

fn refined(spec: &CellProblemSpec) -> CellProblemSpec {
    CellProblemSpec {
        micro_dt: 0.5 * spec.micro_dt,
        micro_lattice: 0.5 * spec.micro_lattice,
        ..spec.clone()
    }
}

/// Floating-point rounding allowance for a sum of `steps` stage costs.
fn rounding_slack(steps: usize, value: f64) -> f64 {
    8.0 * steps as f64 * f64::EPSILON * (value.abs() + 1.0)
}

/// `duration·|ℓ(ũ_snapped) − ℓ(ũ)|`: coercive bound shift caused by snapping
/// the endpoints to the lattice.
fn snap_allowance(model: &ModelSpec, spec: &CellProblemSpec, realized: Vector, duration: f64) -> f64 {
    let lc = &model.lagrangian.running_cost;
    match model.dynamics.inverse_near(spec.x0, spec.u_tilde, realized, model.dimension) {
        Ok(u) => duration * (lc.eval(u) - lc.eval(spec.u_tilde)).abs(),
        Err(_) => 0.0,
    }
}

fn solve_cell(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    spec: &CellProblemSpec,
    a: f64,
    b: f64,
    unfrozen: Option<f64>,
    opts: CellOptions,
) -> Result<CellResult> {
    let st = CellStages::new(model, env, spec, a, b, unfrozen)?;
    let out = st.backward(opts.record_path)?;
    if !out.value.is_finite() {
        return Err(Error::Infeasible(format!(
            "no admissible lattice path reaches the target (ũ = {:?}, b − a = {})",
            spec.u_tilde,
            b - a
        )));
    }
    let duration = b - a;
    let geo = &st.geo;
    let mut realized = Vector::ZERO;
    for ax in 0..geo.dim {
        realized.0[ax] = (geo.target[ax] - geo.start[ax]) as f64 * geo.h / duration;
    }
    let mut tol = rounding_slack(geo.steps, out.value) + snap_allowance(model, spec, realized, duration);
    if opts.richardson {
        let fine = CellStages::new(model, env, &refined(spec), a, b, unfrozen)?.backward(false)?;
        if fine.value.is_finite() {
            tol += (fine.value - out.value).abs();
        }
    }
    Ok(CellResult {
        value: out.value,
        endpoint_residual: geo.residual,
        argmin_path: out.path,
        dp_tolerance: tol,
        duration,
        realized_velocity: realized,
    })
}

/// Minimal cost `F_{0,b}` of the cell problem with `b = spec.horizon_b`.
pub fn point_to_point_cost(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    spec: &CellProblemSpec,
    opts: CellOptions,
) -> Result<CellResult> {
    solve_cell(model, env, spec, 0.0, spec.horizon_b, None, opts)
}

/// `F_{a,b}`: from `o + a·f(x0,ũ)` to `o + b·f(x0,ũ)` over fast time `[a, b]`,
/// reading the environment at absolute positions.
pub fn f_ab(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    a: f64,
    b: f64,
    base: &CellProblemSpec,
    opts: CellOptions,
) -> Result<CellResult> {
    solve_cell(model, env, base, a, b, None, opts)
}

/// Cell cost with the macroscopic state released: over fast time `s` the
/// Lagrangian is evaluated at `(t0 + ε s, x0 + ε (y(s) − o))` and controls
/// are inverted at that position. Returns the unscaled value.
pub fn nonstationary_cell_cost(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    spec: &CellProblemSpec,
    eps: f64,
    opts: CellOptions,
) -> Result<CellResult> {
    if !(eps > 0.0) {
        return Err(Error::Domain("ε must be positive".into()));
    }
    let tau = eps * spec.horizon_b;
    let k = spec.control_radius;
    let eta = model.dynamics.eta(k);
    if tau * model.f_star(k) > eta {
        return Err(Error::Domain(format!(
            "τ·f*(K) = {} exceeds η(K) = {eta}; the released state may leave the inversion radius",
            tau * model.f_star(k)
        )));
    }
    solve_cell(model, env, spec, 0.0, spec.horizon_b, Some(eps), opts)
}

/// `L_{τ,ε}(t0, x0, ũ) = ε F_{0,τ/ε}` with fast origin `x0/ε`.
#[allow(clippy::too_many_arguments)]
pub fn macro_cell_cost(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    t0: f64,
    x0: Vector,
    u_tilde: Vector,
    tau: f64,
    eps: f64,
    micro: &MicroGrid,
    opts: CellOptions,
) -> Result<CellResult> {
    let mut spec = CellProblemSpec::new(t0, x0, u_tilde, micro, tau / eps);
    spec.fast_origin = Some(x0 * (1.0 / eps));
    let mut r = point_to_point_cost(model, env, &spec, opts)?;
    r.value *= eps;
    r.dp_tolerance *= eps;
    Ok(r)
}

/// `L̂_{τ,ε}(t0, x0, ũ)`: [`macro_cell_cost`] with the macroscopic state
/// released, scaled the same way.
#[allow(clippy::too_many_arguments)]
pub fn released_macro_cell_cost(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    t0: f64,
    x0: Vector,
    u_tilde: Vector,
    tau: f64,
    eps: f64,
    micro: &MicroGrid,
    opts: CellOptions,
) -> Result<CellResult> {
    let mut spec = CellProblemSpec::new(t0, x0, u_tilde, micro, tau / eps);
    spec.fast_origin = Some(x0 * (1.0 / eps));
    let mut r = nonstationary_cell_cost(model, env, &spec, eps, opts)?;
    r.value *= eps;
    r.dp_tolerance *= eps;
    Ok(r)
}

/// Bound on `|L_{τ,ε} − L̂_{τ,ε}|` for controls in the ball of radius `k`:
/// `τ²[‖L‖_Lip + f*(K)‖L‖^{K+η}_Lip‖H‖^{K+η}_Lip] + τ m_L(τ f*(K))`.
pub fn stationary_gap_bound(model: &ModelSpec, tau: f64, k: f64) -> f64 {
    let r = k + model.dynamics.eta(k);
    let fs = model.f_star(k);
    tau * tau * (model.lip_l_t() + fs * model.lip_l_u(r) * model.dynamics.lip_h(r)) + tau * model.m_l(tau * fs)
}

// ---------------------------------------------------------------------------
// Subadditive series and effective Lagrangian

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubadditiveSeries {
    pub b_values: Vec<f64>,
    pub f_values: Vec<f64>,
    pub ratios: Vec<f64>,
    pub plateau_estimate: f64,
    pub plateau_error: f64,
    /// Ratios oscillate by more than the discretisation tolerance.
    pub non_monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveEstimate {
    pub series: SubadditiveSeries,
    pub value: f64,
    /// Half spread of the plateau ratios.
    pub error: f64,
    /// Largest Richardson difference per unit horizon (0 when not computed).
    pub dp_rate: f64,
}

/// Default horizon schedule for the long-time limit.
pub const DEFAULT_B_SCHEDULE: [f64; 5] = [12.5, 25.0, 50.0, 100.0, 200.0];

fn plateau(ratios: &[f64]) -> (f64, f64) {
    let n = ratios.len();
    let q = n.div_ceil(4).max(2).min(n);
    let tail = &ratios[n - q..];
    let mean = tail.iter().sum::<f64>() / q as f64;
    let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, 0.5 * (hi - lo))
}

/// `F_{0,b}` for every `b` in the schedule, from one forward pass when the
/// problem has a tube and one backward pass per horizon otherwise.
fn series_values(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    base: &CellProblemSpec,
    schedule: &[f64],
) -> Result<Vec<f64>> {
    let b_max = *schedule.last().unwrap_or(&base.horizon_b);
    if base.tube_halfwidth.is_none() || base.endpoint != EndpointMode::Hard {
        return schedule
            .iter()
            .map(|&b| {
                let spec = CellProblemSpec {
                    horizon_b: b,
                    ..base.clone()
                };
                point_to_point_cost(model, env, &spec, CellOptions::fast()).map(|r| r.value)
            })
            .collect();
    }
    let spec = CellProblemSpec {
        horizon_b: b_max,
        ..base.clone()
    };
    let st = CellStages::new(model, env, &spec, 0.0, b_max, None)?;
    let dt = st.geo.dt;
    let mut checkpoints = Vec::with_capacity(schedule.len());
    for &b in schedule {
        let steps = (b / dt).round() as usize;
        if ((steps as f64) * dt - b).abs() > 1e-9 * b.max(1.0) {
            return Err(Error::config("b_schedule", format!("horizon {b} is not a multiple of micro_dt {dt}")));
        }
        let mut target = [0i64; 2];
        for ax in 0..model.dimension {
            target[ax] = ((st.geo.origin[ax] + b * st.geo.fbar[ax]) / st.geo.h).round() as i64;
        }
        checkpoints.push((steps, target));
    }
    let vals = st.forward(&checkpoints)?;
    if let Some(b) = schedule.iter().zip(&vals).find(|(_, v)| !v.is_finite()).map(|(b, _)| b) {
        return Err(Error::Infeasible(format!("no admissible path for horizon {b}")));
    }
    Ok(vals)
}

/// Fewest horizons a plateau estimate accepts.
pub const MIN_B_SCHEDULE_LEN: usize = 4;

/// Plateau estimate of `lim F_{0,b}/b` along `b_schedule`.
pub fn estimate_effective_lagrangian(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    base: &CellProblemSpec,
    b_schedule: &[f64],
    richardson: bool,
) -> Result<EffectiveEstimate> {
    if b_schedule.len() < MIN_B_SCHEDULE_LEN {
        return Err(Error::config(
            "b_schedule",
            format!("needs at least {MIN_B_SCHEDULE_LEN} horizons"),
        ));
    }
    if b_schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("b_schedule", "must be strictly increasing"));
    }
    let f_values = series_values(model, env, base, b_schedule)?;
    let ratios: Vec<f64> = f_values.iter().zip(b_schedule).map(|(f, b)| f / b).collect();
    let (estimate, error) = plateau(&ratios);
    let mut dp_rate = 0.0;
    if richardson {
        let fine = series_values(model, env, &refined(base), b_schedule)?;
        dp_rate = fine
            .iter()
            .zip(&f_values)
            .zip(b_schedule)
            .map(|((a, b), h)| (a - b).abs() / h)
            .fold(0.0, f64::max);
    }
    let tol = dp_rate.max(1e-12);
    let diffs: Vec<f64> = ratios.windows(2).map(|w| w[1] - w[0]).filter(|d| d.abs() > tol).collect();
    let non_monotone = diffs.windows(2).any(|w| w[0].signum() != w[1].signum());
    Ok(EffectiveEstimate {
        series: SubadditiveSeries {
            b_values: b_schedule.to_vec(),
            f_values,
            ratios,
            plateau_estimate: estimate,
            plateau_error: error,
            non_monotone,
        },
        value: estimate,
        error,
        dp_rate,
    })
}

/// Lattice of an effective-Lagrangian table over `(t, x, ũ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableLattice {
    pub t: Axis,
    pub x: Vec<Axis>,
    pub u: Vec<Axis>,
}

impl TableLattice {
    pub fn grid(&self) -> TensorGrid {
        let mut axes = vec![self.t.clone()];
        axes.extend(self.x.iter().cloned());
        axes.extend(self.u.iter().cloned());
        TensorGrid::new(axes)
    }

    pub fn dimension(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.x.len() != dim || self.u.len() != dim {
            return Err(Error::config("table.lattice", "x and u axes must match the model dimension"));
        }
        self.t.validate("table.lattice.t")?;
        for a in self.x.iter().chain(&self.u) {
            a.validate("table.lattice")?;
        }
        Ok(())
    }

    /// `(t, x, ũ)` of the node with flat index `flat`.
    pub fn node(&self, flat: usize) -> (f64, Vector, Vector) {
        let p = self.grid().point(flat);
        let d = self.dimension();
        let x = Vector::from_slice(&p[1..1 + d]).unwrap_or_default();
        let u = Vector::from_slice(&p[1 + d..]).unwrap_or_default();
        (p[0], x, u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub model_hash: String,
    pub seed: u64,
    pub b_schedule: Vec<f64>,
    pub micro: Option<MicroGrid>,
    /// Table-wide Richardson rate added to every entry error.
    pub dp_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLagrangianTable {
    pub lattice: TableLattice,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub feasible: Vec<bool>,
    pub metadata: TableMetadata,
}

impl EffectiveLagrangianTable {
    /// Table filled from a closed form.
    pub fn from_fn(
        lattice: TableLattice,
        metadata: TableMetadata,
        f: impl Fn(f64, Vector, Vector) -> f64,
    ) -> Self {
        let n = lattice.grid().len();
        let values = (0..n)
            .map(|i| {
                let (t, x, u) = lattice.node(i);
                f(t, x, u)
            })
            .collect();
        EffectiveLagrangianTable {
            lattice,
            values,
            errors: vec![0.0; n],
            feasible: vec![true; n],
            metadata,
        }
    }

    /// Multilinear interpolation of `L̃(t, x, ũ)` inside the lattice hull.
    pub fn value(&self, t: f64, x: Vector, u: Vector) -> Result<f64> {
        let d = self.lattice.dimension();
        let mut q = Vec::with_capacity(1 + 2 * d);
        q.push(t);
        q.extend_from_slice(x.components(d));
        q.extend_from_slice(u.components(d));
        match self.lattice.grid().interpolate(&self.values, &q) {
            Some(v) if v.is_finite() => Ok(v),
            Some(_) => Err(Error::Extrapolation(format!(
                "(t, x, ũ) = ({t}, {x:?}, {u:?}) touches an infeasible node"
            ))),
            None => Err(Error::Extrapolation(format!("(t, x, ũ) = ({t}, {x:?}, {u:?})"))),
        }
    }

    /// Whether `u` lies inside the control hull of the table.
    pub fn covers_control(&self, u: Vector) -> bool {
        self.lattice.u.iter().enumerate().all(|(k, a)| a.contains(u[k]))
    }

    /// Largest `|L̃(t_{k+1}) − L̃(t_k)| / Δt` across adjacent time slices.
    pub fn max_time_slope(&self) -> f64 {
        let g = self.lattice.grid();
        let nt = self.lattice.t.n;
        if nt < 2 {
            return 0.0;
        }
        let per_slice = g.len() / nt;
        let dt = self.lattice.t.step();
        let mut worst: f64 = 0.0;
        for k in 0..nt - 1 {
            for j in 0..per_slice {
                let a = self.values[k * per_slice + j];
                let b = self.values[(k + 1) * per_slice + j];
                if a.is_finite() && b.is_finite() {
                    worst = worst.max((b - a).abs() / dt);
                }
            }
        }
        worst
    }
}

/// One estimate per lattice node. Nodes are independent and processed in
/// parallel; results are collected in node order. Every tenth node also
/// runs the refined Richardson solve, and the largest resulting rate is added
/// to all entry errors.
pub fn build_table(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    lattice: &TableLattice,
    micro: &MicroGrid,
    b_schedule: &[f64],
    model_hash: String,
) -> Result<EffectiveLagrangianTable> {
    lattice.validate(model.dimension)?;
    let grid = lattice.grid();
    let b_max = *b_schedule.last().ok_or_else(|| Error::config("b_schedule", "is empty"))?;
    let results: Vec<Result<EffectiveEstimate>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (t, x, u) = lattice.node(i);
            let spec = CellProblemSpec::new(t, x, u, micro, b_max);
            estimate_effective_lagrangian(model, env, &spec, b_schedule, i % 10 == 0)
        })
        .collect();
    let mut values = Vec::with_capacity(results.len());
    let mut errors = Vec::with_capacity(results.len());
    let mut feasible = Vec::with_capacity(results.len());
    let mut dp_rate: f64 = 0.0;
    for r in results {
        match r {
            Ok(est) => {
                dp_rate = dp_rate.max(est.dp_rate);
                values.push(est.value);
                errors.push(est.error);
                feasible.push(true);
            }
            Err(Error::Infeasible(_)) => {
                values.push(f64::NAN);
                errors.push(f64::NAN);
                feasible.push(false);
            }
            Err(e) => return Err(e),
        }
    }
    for e in errors.iter_mut() {
        *e += dp_rate;
    }
    Ok(EffectiveLagrangianTable {
        lattice: lattice.clone(),
        values,
        errors,
        feasible,
        metadata: TableMetadata {
            model_hash,
            seed: env.seed,
            b_schedule: b_schedule.to_vec(),
            micro: Some(micro.clone()),
            dp_rate,
        },
    })
}

/// Oracle access to the stage costs of `F_{a,b}` for path enumeration.
pub fn cell_stages<'a>(
    model: &'a ModelSpec,
    env: &'a EnvironmentHandle,
    spec: &CellProblemSpec,
    a: f64,
    b: f64,
) -> Result<CellStages<'a>> {
    CellStages::new(model, env, spec, a, b, None)
}
