//! Hamiltonians as sup-transforms over the control ball, and a monotone
//! Lax–Friedrichs solver for the backward Hamilton–Jacobi equation
//! `−∂V/∂t + H(t, x, DV) = 0`, `V(T) = ψ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::EffectiveLagrangianTable;
use crate::env::EnvironmentHandle;
use crate::interp::{Axis, TensorGrid};
use crate::io::{axis_names, num, parse_num, read_document, write_document, Document};
use crate::model::ModelSpec;
use crate::solve::{GridSpec, ValueField, ValueKind};
use crate::{Error, Result, Vector};

/// Golden-section iterations per refinement pass.
const GOLDEN_ITERS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianValue {
    pub value: f64,
    pub argmax: Vector,
    /// Radius of the control ball the sup was taken over.
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HamiltonianOptions {
    /// Control radius; `None` derives it from coercivity and `|p|`.
    pub radius: Option<f64>,
    /// Grid points per axis before refinement.
    pub points: usize,
}

impl Default for HamiltonianOptions {
    fn default() -> Self {
        HamiltonianOptions {
            radius: None,
            points: 401,
        }
    }
}

/// Maximises `g` over a grid on `[−r, r]^d ∩ B_r`, then refines each axis
/// by golden section inside the neighbouring cells. Returns the maximiser,
/// the value and whether the grid maximum sat on the ball's boundary
/// strictly above every interior point.
fn grid_sup(dim: usize, r: f64, n: usize, g: &dyn Fn(Vector) -> f64) -> (Vector, f64, bool) {
    let n = n.max(3) | 1;
    let step = 2.0 * r / (n - 1) as f64;
    let node = |i: usize| -r + i as f64 * step;
    let mut best = (Vector::ZERO, f64::NEG_INFINITY);
    let mut best_inner = f64::NEG_INFINITY;
    let mut best_outer = f64::NEG_INFINITY;
    let mut visit = |u: Vector, outer: bool| {
        let v = g(u);
        if v > best.1 {
            best = (u, v);
        }
        if outer {
            best_outer = best_outer.max(v);
        } else {
            best_inner = best_inner.max(v);
        }
    };
    if dim == 1 {
        for i in 0..n {
            visit(Vector::new1(node(i)), i == 0 || i == n - 1);
        }
    } else {
        for i in 0..n {
            for j in 0..n {
                let u = Vector::new2(node(i), node(j));
                let norm = u.norm();
                if norm > r * (1.0 + 1e-12) {
                    continue;
                }
                visit(u, norm > r - step);
            }
        }
    }
    let on_boundary = best_outer > best_inner + 1e-12;
    let mut u = best.0;
    let mut val = best.1;
    for ax in 0..dim {
        let lo = (u[ax] - step).max(-r);
        let hi = (u[ax] + step).min(r);
        let (x, v) = golden_max(lo, hi, |s| {
            let mut w = u;
            w.0[ax] = s;
            if w.norm() > r { f64::NEG_INFINITY } else { g(w) }
        });
        if v > val {
            val = v;
            u.0[ax] = x;
        }
    }
    (u, val, on_boundary)
}

fn golden_max(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd { (c, fc) } else { (d, fd) }
}

/// `H(t, x, y, p) = sup_u { −f(x, u)·p − L(t, x, y, u) }`. If the grid
/// maximum lies on the boundary the radius is doubled once.
pub fn hamiltonian(
    model: &ModelSpec,
    env: &EnvironmentHandle,
    t: f64,
    x: Vector,
    y: Vector,
    p: Vector,
    opts: HamiltonianOptions,
) -> Result<HamiltonianValue> {
    let mut r = match opts.radius {
        Some(r) => r,
        None => model.hamiltonian_radius(env, p)?,
    };
    let g = |u: Vector| -model.eval_f(x, u).dot(p) - model.eval_l(env, t, x, y, u);
    for attempt in 0..2 {
        let (u, v, boundary) = grid_sup(model.dimension, r, opts.points, &g);
        if !boundary {
            return Ok(HamiltonianValue { value: v, argmax: u, radius: r });
        }
        if attempt == 0 {
            r *= 2.0;
        }
    }
    Err(Error::RadiusTooSmall { radius: r })
}

/// `H̃(t, x, p) = sup_ũ { −f(x, ũ)·p − L̃(t, x, ũ) }` over the table's
/// control lattice, refined by golden section on the interpolant.
pub fn effective_hamiltonian(
    model: &ModelSpec,
    table: &EffectiveLagrangianTable,
    t: f64,
    x: Vector,
    p: Vector,
) -> Result<HamiltonianValue> {
    let d = model.dimension;
    let axes = &table.lattice.u;
    let g = |u: Vector| -> f64 {
        match table.value(t, x, u) {
            Ok(l) => -model.eval_f(x, u).dot(p) - l,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let sub = TensorGrid::new(axes.clone());
    let mut best = (Vector::ZERO, f64::NEG_INFINITY, 0usize);
    for flat in 0..sub.len() {
        let u = Vector::from_slice(&sub.point(flat)).unwrap_or_default();
        let v = g(u);
        if v > best.1 {
            best = (u, v, flat);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Extrapolation(format!("table has no feasible control at t = {t}, x = {x:?}")));
    }
    let idx = sub.unflatten(best.2);
    if idx.iter().zip(axes).any(|(&i, a)| a.n > 1 && (i == 0 || i + 1 == a.n)) {
        // Attained on the hull of the table: the sup may lie outside.
        let interior = (0..sub.len())
            .filter(|&f| {
                sub.unflatten(f).iter().zip(axes).all(|(&i, a)| a.n == 1 || (i > 0 && i + 1 < a.n))
            })
            .map(|f| g(Vector::from_slice(&sub.point(f)).unwrap_or_default()))
            .fold(f64::NEG_INFINITY, f64::max);
        if best.1 > interior + 1e-12 {
            let radius = axes.iter().map(|a| a.max.abs().max(a.min.abs())).fold(0.0, f64::max);
            return Err(Error::RadiusTooSmall { radius });
        }
    }
    let mut u = best.0;
    let mut val = best.1;
    for (ax, a) in axes.iter().enumerate().take(d) {
        if a.n < 2 {
            continue;
        }
        let lo = (u[ax] - a.step()).max(a.min);
        let hi = (u[ax] + a.step()).min(a.max);
        let (s, v) = golden_max(lo, hi, |s| {
            let mut w = u;
            w.0[ax] = s;
            g(w)
        });
        if v > val {
            val = v;
            u.0[ax] = s;
        }
    }
    let radius = axes.iter().map(|a| a.max.abs().max(a.min.abs())).fold(0.0, f64::max);
    Ok(HamiltonianValue { value: val, argmax: u, radius })
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianLattice {
    pub t: Axis,
    pub x: Vec<Axis>,
    pub p: Vec<Axis>,
}

impl HamiltonianLattice {
    pub fn grid(&self) -> TensorGrid {
        let mut axes = vec![self.t.clone()];
        axes.extend(self.x.iter().cloned());
        axes.extend(self.p.iter().cloned());
        TensorGrid::new(axes)
    }

    pub fn node(&self, flat: usize) -> (f64, Vector, Vector) {
        let pt = self.grid().point(flat);
        let d = self.x.len();
        (
            pt[0],
            Vector::from_slice(&pt[1..1 + d]).unwrap_or_default(),
            Vector::from_slice(&pt[1 + d..]).unwrap_or_default(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianTable {
    pub lattice: HamiltonianLattice,
    pub values: Vec<f64>,
    pub argmax: Vec<Vector>,
    pub control_radius: f64,
    /// `true` for the effective Hamiltonian H̃.
    pub effective: bool,
}

impl HamiltonianTable {
    /// Tabulates `h(t, x, p)` on the lattice, nodes in parallel.
    pub fn build(
        lattice: HamiltonianLattice,
        effective: bool,
        h: &(dyn Fn(f64, Vector, Vector) -> Result<HamiltonianValue> + Sync),
    ) -> Result<Self> {
        let n = lattice.grid().len();
        let out: Vec<Result<HamiltonianValue>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (t, x, p) = lattice.node(i);
                h(t, x, p)
            })
            .collect();
        let mut values = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        let mut radius: f64 = 0.0;
        for r in out {
            let r = r?;
            values.push(r.value);
            argmax.push(r.argmax);
            radius = radius.max(r.radius);
        }
        Ok(HamiltonianTable {
            lattice,
            values,
            argmax,
            control_radius: radius,
            effective,
        })
    }

    pub fn value(&self, t: f64, x: Vector, p: Vector) -> Result<f64> {
        let d = self.lattice.x.len();
        let mut q = vec![t];
        q.extend_from_slice(x.components(d));
        q.extend_from_slice(p.components(d));
        self.lattice
            .grid()
            .interpolate(&self.values, &q)
            .ok_or_else(|| Error::Extrapolation(format!("(t, x, p) = ({t}, {x:?}, {p:?}) is outside the Hamiltonian table")))
    }

    /// Smallest discrete second difference along every p line (≥ 0 for a
    /// convex Hamiltonian).
    pub fn min_convexity(&self) -> f64 {
        let g = self.lattice.grid();
        let d = self.lattice.x.len();
        let mut worst = f64::INFINITY;
        for flat in 0..g.len() {
            let idx = g.unflatten(flat);
            for ax in 1 + d..1 + 2 * d {
                if idx[ax] == 0 || idx[ax] + 1 >= g.axes[ax].n {
                    continue;
                }
                let mut lo = idx.clone();
                let mut hi = idx.clone();
                lo[ax] -= 1;
                hi[ax] += 1;
                let v = self.values[g.flatten(&lo)] - 2.0 * self.values[flat] + self.values[g.flatten(&hi)];
                worst = worst.min(v);
            }
        }
        worst
    }

    pub fn to_csv(&self) -> Result<String> {
        let d = self.lattice.x.len();
        let mut cols = vec!["t".to_string()];
        cols.extend(axis_names("x", d));
        cols.extend(axis_names("p", d));
        cols.push("H".into());
        cols.extend(axis_names("argmax", d));
        let g = self.lattice.grid();
        let rows: Vec<Vec<String>> = (0..g.len())
            .map(|i| {
                let mut r: Vec<String> = g.point(i).into_iter().map(num).collect();
                r.push(num(self.values[i]));
                r.extend(self.argmax[i].components(d).iter().map(|c| num(*c)));
                r
            })
            .collect();
        #[derive(Serialize)]
        struct Head<'a> {
            lattice: &'a HamiltonianLattice,
            control_radius: f64,
            effective: bool,
        }
        write_document(
            "hamiltonian_table",
            &Head {
                lattice: &self.lattice,
                control_radius: self.control_radius,
                effective: self.effective,
            },
            &cols,
            &rows,
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            lattice: HamiltonianLattice,
            control_radius: f64,
            effective: bool,
        }
        let doc: Document<Head> = read_document("hamiltonian_table", text)?;
        let d = doc.header.lattice.x.len();
        let n = doc.header.lattice.grid().len();
        if doc.rows.len() != n {
            return Err(Error::Format("Hamiltonian table row count does not match its lattice".into()));
        }
        let mut values = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for r in &doc.rows {
            if r.len() != 2 + 3 * d {
                return Err(Error::Format("Hamiltonian row has the wrong number of fields".into()));
            }
            values.push(parse_num(&r[1 + 2 * d])?);
            let c = r[2 + 2 * d..].iter().map(|s| parse_num(s)).collect::<Result<Vec<_>>>()?;
            argmax.push(Vector::from_slice(&c).unwrap_or_default());
        }
        Ok(HamiltonianTable {
            lattice: doc.header.lattice,
            values,
            argmax,
            control_radius: doc.header.control_radius,
            effective: doc.header.effective,
        })
    }
}

// ---------------------------------------------------------------------------
// HJB

/// Hamiltonian accessor for [`solve_hjb`].
pub type HamiltonianFn<'a> = dyn Fn(f64, Vector, Vector) -> Result<f64> + Sync + 'a;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HjbOptions {
    /// Half-width of the p box sampled for the dissipation coefficients;
    /// `None` re-samples every step on the slope range of the current slice
    /// (widened by `P_MARGIN`).
    pub p_max: Option<f64>,
    /// Samples per axis for the dissipation estimate.
    pub samples: usize,
}

impl Default for HjbOptions {
    fn default() -> Self {
        HjbOptions { p_max: None, samples: 129 }
    }
}

/// Relative widening of the sampled slope range.
const P_MARGIN: f64 = 0.1;

fn slope_bound(space: &TensorGrid, v: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for flat in 0..space.len() {
        let idx = space.unflatten(flat);
        for (ax, a) in space.axes.iter().enumerate() {
            if idx[ax] + 1 < a.n {
                let mut j = idx.clone();
                j[ax] += 1;
                worst = worst.max((v[space.flatten(&j)] - v[flat]).abs() / a.step());
            }
        }
    }
    worst
}

/// Per-axis dissipation `α_k = max |∂H/∂p_k|`, sampled by central
/// differences at the given times, the space nodes of a coarse subgrid and
/// the p box `[−p_max, p_max]^d`.
fn dissipation(h: &HamiltonianFn, grid: &GridSpec, times: &[f64], p_max: f64, samples: usize) -> Result<Vec<f64>> {
    let d = grid.dimension();
    let space = grid.space();
    let stride = (space.len() / 16).max(1);
    let samples = if d == 2 { samples.min(33) } else { samples };
    let ps: Vec<f64> = (0..samples).map(|i| -p_max + 2.0 * p_max * i as f64 / (samples - 1).max(1) as f64).collect();
    let dp = 1e-4 * p_max.max(1.0);
    let mut alpha = vec![0.0f64; d];
    for &t in times {
        for flat in (0..space.len()).step_by(stride) {
            let x = grid.node(flat);
            for ax in 0..d {
                for &a in &ps {
                    for &b in if d == 2 { &ps[..] } else { &[0.0][..] } {
                        let mut p = if d == 1 { Vector::new1(a) } else { Vector::new2(a, b) };
                        if d == 2 && ax == 1 {
                            p = Vector::new2(b, a);
                        }
                        let e = Vector::axis(ax) * dp;
                        let slope = (h(t, x, p + e)? - h(t, x, p - e)?) / (2.0 * dp);
                        alpha[ax] = alpha[ax].max(slope.abs());
                    }
                }
            }
        }
    }
    Ok(alpha)
}

/// Explicit monotone scheme for `−∂V/∂t + H(t, x, DV) = 0` with
///
/// ```text
/// V^n = V^{n+1} − dt [ H(t_{n+1}, x, D⁰V) − Σ_k α_k (V_{k+} − 2V + V_{k−}) / (2 dx) ]
/// ```
///
/// Ghost nodes outside the box copy the boundary value; unlike linear
/// extrapolation this keeps every stencil coefficient non-negative, so the
/// scheme stays monotone up to the boundary.
pub fn solve_hjb(h: &HamiltonianFn, grid: &GridSpec, terminal: &[f64], opts: HjbOptions) -> Result<ValueField> {
    grid.validate_shape(grid.dimension())?;
    let space = grid.space();
    let n = space.len();
    if terminal.len() != n {
        return Err(Error::Domain("terminal data does not match the space grid".into()));
    }
    let samples = opts.samples.max(3);
    let fixed = match opts.p_max {
        Some(pm) => {
            let s = grid.steps();
            let times: Vec<f64> = (0..=s).step_by((s / 8).max(1)).map(|k| grid.time(k)).collect();
            Some(dissipation(h, grid, &times, pm, samples)?)
        }
        None => None,
    };
    let steps = grid.steps();
    let d = grid.dimension();
    let mut values = vec![0.0; (steps + 1) * n];
    values[steps * n..].copy_from_slice(terminal);
    for k in (0..steps).rev() {
        let t_next = grid.time(k + 1);
        let (done, next) = values.split_at_mut((k + 1) * n);
        let next = &next[..n];
        let alpha = match &fixed {
            Some(a) => a.clone(),
            None => {
                let pm = slope_bound(&space, next) * (1.0 + P_MARGIN) + 1e-9;
                dissipation(h, grid, &[t_next], pm, samples)?
            }
        };
        let rate: f64 = alpha.iter().map(|a| a / grid.dx).sum();
        if grid.dt * rate > 1.0 + 1e-12 {
            return Err(Error::Cfl {
                dt: grid.dt,
                suggested: 0.9 / rate,
            });
        }
        let out: Vec<Result<f64>> = (0..n)
            .into_par_iter()
            .map(|flat| {
                let idx = space.unflatten(flat);
                let x = grid.node(flat);
                let v = next[flat];
                let mut p = Vector::ZERO;
                let mut diss = 0.0;
                for ax in 0..d {
                    let a = &space.axes[ax];
                    let neighbour = |off: isize| -> f64 {
                        let mut j = idx.clone();
                        j[ax] = (j[ax] as isize + off) as usize;
                        next[space.flatten(&j)]
                    };
                    let (lo, hi) = match (idx[ax] > 0, idx[ax] + 1 < a.n) {
                        (true, true) => (neighbour(-1), neighbour(1)),
                        (false, true) => (v, neighbour(1)),
                        (true, false) => (neighbour(-1), v),
                        (false, false) => (v, v),
                    };
                    p.0[ax] = (hi - lo) / (2.0 * grid.dx);
                    diss += alpha[ax] * (hi - 2.0 * v + lo) / (2.0 * grid.dx);
                }
                Ok(v - grid.dt * (h(t_next, x, p)? - diss))
            })
            .collect();
        for (flat, r) in out.into_iter().enumerate() {
            done[k * n + flat] = r?;
        }
    }
    Ok(ValueField {
        grid: grid.clone(),
        kind: ValueKind::Hjb,
        values,
        policy: Vec::new(),
        boundary_hits: 0,
    })
}
