//! The controlled system `(f, L)` and its growth constants.
//!
//! ```text
//! x'(s) = f(x, u)                     dynamics (time independent)
//! L(t, x, y, u) = m(t, x) + V_ω(y) + ℓ(u)
//! J = ∫ L(s, x, x/ε, u) ds + ψ(x(T))
//! ```
//!
//! Constants used by the error formulas:
//!
//! ```text
//! L_*(u)      = inf_{t,x,y} L                 lower envelope in u
//! L^*(R)      = sup over |u| ≤ R of |L|
//! f^*(R)      = sup over |u| ≤ R of |f|
//! δ, M        f(x, U^M) contains the sphere of radius δ
//! η(R)        local inverse H(x, ·) exists on B_η(f(x, u)), |u| ≤ R
//! γ(u)        = L_*(u) / f^*(|u| + λ)
//! Θ(u)        = J(u)^{-T} ∇L_*(u),   J = D_u f
//! ```

use serde::{Deserialize, Serialize};

use crate::env::EnvironmentHandle;
use crate::interp::TensorGrid;
use crate::{Error, Result, Vector};

// ---------------------------------------------------------------------------
// Dynamics

/// Tabulated dynamics: samples of `f(x, u)` on a tensor grid over
/// `(x_1..x_d, u_1..u_d)`, interpolated multilinearly. Queries outside the
/// grid are clamped to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTable {
    pub grid: TensorGrid,
    /// One velocity per grid node.
    pub values: Vec<Vector>,
    pub delta: f64,
    /// Control bound realising the δ-sphere.
    pub m: f64,
    /// Declared inversion radius η, constant in R.
    pub eta: f64,
    /// Declared Lipschitz bound of the local inverse.
    pub lip_h: f64,
}

impl UserTable {
    /// Parses rows `x.., u.., f..` (header line required) sampled on a full
    /// tensor grid in row-major order.
    pub fn from_csv(text: &str, dimension: usize, delta: f64, m: f64, eta: f64, lip_h: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let cols = 3 * dimension;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != cols {
                return Err(Error::Format(format!("user table rows need {cols} columns, got {}", rec.len())));
            }
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Format(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let rank = 2 * dimension;
        let mut axes = Vec::with_capacity(rank);
        for k in 0..rank {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            if vals.len() < 2 {
                return Err(Error::Format(format!("user table axis {k} needs at least two values")));
            }
            axes.push(crate::interp::Axis::new(vals[0], *vals.last().unwrap(), vals.len())?);
        }
        let grid = TensorGrid::new(axes);
        if grid.len() != rows.len() {
            return Err(Error::Format("user table is not a full tensor grid".into()));
        }
        let mut values = vec![Vector::ZERO; rows.len()];
        for row in &rows {
            let idx: Vec<usize> = grid.axes.iter().zip(row).map(|(a, &x)| a.nearest(x)).collect();
            values[grid.flatten(&idx)] = Vector::from_slice(&row[rank..]).unwrap_or_default();
        }
        let t = UserTable {
            grid,
            values,
            delta,
            m,
            eta,
            lip_h,
        };
        if !(delta > 0.0 && m >= 0.0 && eta > 0.0 && lip_h > 0.0) {
            return Err(Error::config("model.dynamics", "user table needs positive delta, eta, lip_h"));
        }
        Ok(t)
    }

    fn dimension(&self) -> usize {
        self.grid.rank() / 2
    }

    fn eval(&self, x: Vector, u: Vector) -> Vector {
        let d = self.dimension();
        let mut q = [0.0; 4];
        for k in 0..d {
            q[k] = x[k];
            q[d + k] = u[k];
        }
        for (k, a) in self.grid.axes.iter().enumerate() {
            q[k] = q[k].clamp(a.min, a.max);
        }
        let mut out = Vector::ZERO;
        for c in 0..d {
            let comp: Vec<f64> = self.values.iter().map(|v| v[c]).collect();
            out.0[c] = self.grid.interpolate(&comp, &q[..2 * d]).unwrap_or(f64::NAN);
        }
        out
    }

    fn f_star(&self, r: f64) -> f64 {
        let d = self.dimension();
        (0..self.grid.len())
            .filter(|&i| {
                let p = self.grid.point(i);
                p[d..].iter().map(|c| c * c).sum::<f64>().sqrt() <= r + 1e-12
            })
            .map(|i| self.values[i].norm())
            .fold(0.0, f64::max)
    }

    /// Largest difference quotient between neighbouring grid nodes.
    fn lipschitz(&self) -> f64 {
        let mut lip: f64 = 0.0;
        for i in 0..self.grid.len() {
            let idx = self.grid.unflatten(i);
            for (k, a) in self.grid.axes.iter().enumerate() {
                if idx[k] + 1 < a.n {
                    let mut j = idx.clone();
                    j[k] += 1;
                    let diff = (self.values[self.grid.flatten(&j)] - self.values[i]).norm();
                    lip = lip.max(diff / a.step());
                }
            }
        }
        lip * (self.grid.rank() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsSpec {
    /// `f(x, u) = u`.
    CalculusOfVariations,
    /// `f(x, u) = C u / sqrt(|u|² + 1)`; speeds stay strictly below C and
    /// the inverse is `u = v / (C sqrt(1 − |v|²/C²))`.
    BoundedSpeed { c: f64 },
    /// `f(x, u) = u (1 − |u|)`: not injective, kept to exercise the checks.
    NoninjectiveToy,
    UserTable(UserTable),
}

/// δ for the non-injective toy; reached at |u| = (1 − sqrt(1 − 4δ)) / 2.
const TOY_DELTA: f64 = 0.2;

impl DynamicsSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DynamicsSpec::BoundedSpeed { c } if !(*c > 0.0 && c.is_finite()) => {
                Err(Error::config("model.dynamics.c", "speed bound must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// True when `f` does not depend on `x`.
    pub fn is_x_independent(&self) -> bool {
        !matches!(self, DynamicsSpec::UserTable(_))
    }

    pub fn eval_f(&self, x: Vector, u: Vector) -> Vector {
        match self {
            DynamicsSpec::CalculusOfVariations => u,
            DynamicsSpec::BoundedSpeed { c } => u * (c / (u.norm_sq() + 1.0).sqrt()),
            DynamicsSpec::NoninjectiveToy => u * (1.0 - u.norm()),
            DynamicsSpec::UserTable(t) => t.eval(x, u),
        }
    }

    /// Radius δ of the velocity sphere reachable with controls in `U^M`.
    pub fn delta(&self) -> f64 {
        match self {
            DynamicsSpec::CalculusOfVariations => 1.0,
            DynamicsSpec::BoundedSpeed { c } => 0.5 * c,
            DynamicsSpec::NoninjectiveToy => TOY_DELTA,
            DynamicsSpec::UserTable(t) => t.delta,
        }
    }

    /// Control bound `M` realising the δ-sphere.
    pub fn control_bound(&self) -> f64 {
        match self {
            DynamicsSpec::CalculusOfVariations => 1.0,
            DynamicsSpec::BoundedSpeed { c } => {
                let d = self.delta();
                d / (c * (1.0 - d * d / (c * c)).sqrt())
            }
            DynamicsSpec::NoninjectiveToy => 0.5 * (1.0 - (1.0 - 4.0 * TOY_DELTA).sqrt()),
            DynamicsSpec::UserTable(t) => t.m,
        }
    }

    /// Bound `M̃` on the zero-velocity control.
    pub fn zero_control_bound(&self) -> f64 {
        match self {
            DynamicsSpec::UserTable(t) => t.m,
            _ => 0.0,
        }
    }

    pub fn f_star(&self, r: f64) -> f64 {
        match self {
            DynamicsSpec::CalculusOfVariations => r,
            DynamicsSpec::BoundedSpeed { c } => c * r / (r * r + 1.0).sqrt(),
            DynamicsSpec::NoninjectiveToy => {
                if r <= 0.5 {
                    r * (1.0 - r)
                } else {
                    0.25f64.max(r * (r - 1.0))
                }
            }
            DynamicsSpec::UserTable(t) => t.f_star(r),
        }
    }

    /// Joint Lipschitz constant of `f` in `(x, u)` over `|u| ≤ r`.
    pub fn lip_f(&self, r: f64) -> f64 {
        match self {
            DynamicsSpec::CalculusOfVariations => 1.0,
            DynamicsSpec::BoundedSpeed { c } => *c,
            DynamicsSpec::NoninjectiveToy => 1f64.max(2.0 * r - 1.0),
            DynamicsSpec::UserTable(t) => t.lipschitz(),
        }
    }

    /// Inversion radius η(R). For `f = u` every radius works; 1 is used so
    /// that constants evaluated at `K + η` stay finite.
    pub fn eta(&self, r: f64) -> f64 {
        match self {
            DynamicsSpec::CalculusOfVariations => 1.0,
            DynamicsSpec::BoundedSpeed { c } => 0.5 * (c - self.f_star(r)),
            // The derivative of u(1 − u) vanishes at |u| = 1/2.
            DynamicsSpec::NoninjectiveToy => 0.0,
            DynamicsSpec::UserTable(t) => t.eta,
        }
    }

    /// Lipschitz constant of `H(x, ·)` on velocities within η(R) of `f(x, U^R)`.
    pub fn lip_h(&self, r: f64) -> f64 {
        match self {
            DynamicsSpec::CalculusOfVariations => 1.0,
            DynamicsSpec::BoundedSpeed { c } => {
                // Radial derivative of v ↦ v / sqrt(C² − |v|²) at the
                // largest speed within η of f(U^R).
                let s = (c + self.f_star(r)) / (2.0 * c);
                (1.0 - s * s).powf(-1.5) / c
            }
            DynamicsSpec::NoninjectiveToy => f64::INFINITY,
            DynamicsSpec::UserTable(t) => t.lip_h,
        }
    }

    /// Jacobian `D_u f` as a row-major 2×2 matrix.
    pub fn jacobian(&self, x: Vector, u: Vector, dim: usize) -> [[f64; 2]; 2] {
        match self {
            DynamicsSpec::CalculusOfVariations => [[1.0, 0.0], [0.0, 1.0]],
            DynamicsSpec::BoundedSpeed { c } => {
                let q = u.norm_sq() + 1.0;
                let s = c / q.sqrt();
                let mut j = [[0.0; 2]; 2];
                for (a, row) in j.iter_mut().enumerate() {
                    for (b, e) in row.iter_mut().enumerate() {
                        let id = if a == b { 1.0 } else { 0.0 };
                        *e = s * (id - u[a] * u[b] / q);
                    }
                }
                j
            }
            _ => {
                let mut j = [[0.0, 0.0], [0.0, 1.0]];
                for b in 0..dim {
                    let h = 1e-6 * u.norm().max(1.0);
                    let e = Vector::axis(b) * h;
                    let df = (self.eval_f(x, u + e) - self.eval_f(x, u - e)) * (0.5 / h);
                    for (a, row) in j.iter_mut().enumerate().take(dim) {
                        row[b] = df[a];
                    }
                }
                j
            }
        }
    }

    /// `H(x0, v)` near `u`: a control with `f(x0, ·) = v` and
    /// `|H − u| ≤ ‖H‖_Lip |v − f(x0, u)|`.
    pub fn invert_dynamics(&self, x0: Vector, u: Vector, v: Vector, dim: usize) -> Result<Vector> {
        let r = u.norm();
        let gap = (v - self.eval_f(x0, u)).norm();
        let eta = self.eta(r);
        if gap > eta * (1.0 + 1e-12) + 1e-14 {
            return Err(Error::Domain(format!(
                "velocity is {gap:.3e} away from f(x0, u), beyond the inversion radius η({r:.4}) = {eta:.3e}"
            )));
        }
        self.inverse_near(x0, u, v, dim)
    }

    /// Inverse map without the η-ball check.
    pub(crate) fn inverse_near(&self, x0: Vector, seed: Vector, v: Vector, dim: usize) -> Result<Vector> {
        match self {
            DynamicsSpec::CalculusOfVariations => Ok(v),
            DynamicsSpec::BoundedSpeed { c } => {
                let s = 1.0 - v.norm_sq() / (c * c);
                if s <= 0.0 {
                    return Err(Error::Domain(format!("speed {} not below the bound {c}", v.norm())));
                }
                Ok(v * (1.0 / (c * s.sqrt())))
            }
            _ => newton_inverse(self, x0, seed, v, dim),
        }
    }

    pub fn zero_control(&self, x: Vector, dim: usize) -> Result<Vector> {
        match self {
            DynamicsSpec::UserTable(_) => newton_inverse(self, x, Vector::ZERO, Vector::ZERO, dim),
            _ => Ok(Vector::ZERO),
        }
    }

    /// Control with `f(x, u) = δ v_unit` and `|u| ≤ M`.
    pub fn direction_control(&self, x: Vector, v_unit: Vector, dim: usize) -> Result<Vector> {
        if (v_unit.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("direction must be a unit vector".into()));
        }
        let target = v_unit * self.delta();
        let u = match self {
            DynamicsSpec::CalculusOfVariations | DynamicsSpec::BoundedSpeed { .. } => {
                self.inverse_near(x, Vector::ZERO, target, dim)?
            }
            DynamicsSpec::NoninjectiveToy => v_unit * self.control_bound(),
            DynamicsSpec::UserTable(_) => {
                let u0 = self.zero_control(x, dim)?;
                newton_inverse(self, x, u0, target, dim)?
            }
        };
        if u.norm() > self.control_bound() * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::ModelContract(format!(
                "direction control has norm {} above M = {}",
                u.norm(),
                self.control_bound()
            )));
        }
        Ok(u)
    }
}

/// Damped Newton on `f(x0, w) = v` with a central-difference Jacobian, step
/// halving and an iteration cap of 50.
fn newton_inverse(dynamics: &DynamicsSpec, x0: Vector, seed: Vector, v: Vector, dim: usize) -> Result<Vector> {
    let residual = |w: Vector| dynamics.eval_f(x0, w) - v;
    let mut w = seed;
    let mut g = residual(w);
    let scale = v.norm().max(1.0);
    for _ in 0..50 {
        if g.norm() <= 1e-13 * scale {
            break;
        }
        let j = dynamics.jacobian(x0, w, dim);
        let step = if dim == 1 {
            if j[0][0] == 0.0 {
                return Err(Error::ModelContract("singular Jacobian in dynamics inversion".into()));
            }
            Vector::new1(g[0] / j[0][0])
        } else {
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det == 0.0 {
                return Err(Error::ModelContract("singular Jacobian in dynamics inversion".into()));
            }
            Vector::new2(
                (j[1][1] * g[0] - j[0][1] * g[1]) / det,
                (-j[1][0] * g[0] + j[0][0] * g[1]) / det,
            )
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = w - step * t;
            let gc = residual(cand);
            if gc.norm() < g.norm() {
                w = cand;
                g = gc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if g.norm() <= 1e-10 {
        Ok(w)
    } else {
        Err(Error::ModelContract(format!(
            "dynamics inversion did not converge (residual {:.3e})",
            g.norm()
        )))
    }
}

// ---------------------------------------------------------------------------
// Lagrangian

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunningCost {
    /// `coeff · |u|^beta`
    Power { coeff: f64, beta: f64 },
    /// Constant in `u`; fails the growth condition on purpose.
    Constant { value: f64 },
}

impl RunningCost {
    pub fn quadratic() -> Self {
        RunningCost::Power { coeff: 0.5, beta: 2.0 }
    }

    pub fn eval_radius(&self, r: f64) -> f64 {
        match *self {
            RunningCost::Power { coeff, beta } => {
                if beta == 2.0 {
                    coeff * r * r
                } else {
                    coeff * r.powf(beta)
                }
            }
            RunningCost::Constant { value } => value,
        }
    }

    pub fn eval(&self, u: Vector) -> f64 {
        match *self {
            RunningCost::Power { coeff, beta } if beta == 2.0 => coeff * u.norm_sq(),
            _ => self.eval_radius(u.norm()),
        }
    }

    pub fn gradient(&self, u: Vector) -> Vector {
        match *self {
            RunningCost::Power { coeff, beta } => {
                let r = u.norm();
                if r == 0.0 {
                    return if beta > 1.0 { Vector::ZERO } else { Vector::new2(f64::NAN, f64::NAN) };
                }
                u * (coeff * beta * r.powf(beta - 2.0))
            }
            RunningCost::Constant { .. } => Vector::ZERO,
        }
    }

    /// Lipschitz constant on `|u| ≤ r`.
    pub fn lipschitz(&self, r: f64) -> f64 {
        match *self {
            RunningCost::Power { coeff, beta } => {
                if beta < 1.0 {
                    f64::INFINITY
                } else {
                    coeff.abs() * beta * r.powf(beta - 1.0)
                }
            }
            RunningCost::Constant { .. } => 0.0,
        }
    }
}

fn no_clip() -> f64 {
    f64::INFINITY
}

/// `m(t, x) = constant + rate_t·t + slope_x·clip(x) + bilinear·t·Σ_k clip(x_k)`
/// where `clip` clamps each coordinate to `[−clip, clip]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroTerm {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub rate_t: f64,
    #[serde(default)]
    pub slope_x: Vector,
    #[serde(default)]
    pub bilinear: f64,
    #[serde(default = "no_clip")]
    pub clip: f64,
}

impl Default for MacroTerm {
    fn default() -> Self {
        MacroTerm {
            constant: 0.0,
            rate_t: 0.0,
            slope_x: Vector::ZERO,
            bilinear: 0.0,
            clip: f64::INFINITY,
        }
    }
}

impl MacroTerm {
    pub fn eval(&self, t: f64, x: Vector) -> f64 {
        let xc = x.map(|c| c.clamp(-self.clip, self.clip));
        let mut v = self.constant + self.rate_t * t;
        if self.slope_x != Vector::ZERO {
            v += self.slope_x.dot(xc);
        }
        if self.bilinear != 0.0 {
            v += self.bilinear * t * (xc[0] + xc[1]);
        }
        v
    }

    pub fn is_x_independent(&self) -> bool {
        self.slope_x == Vector::ZERO && self.bilinear == 0.0
    }

    pub fn is_constant(&self) -> bool {
        self.is_x_independent() && self.rate_t == 0.0
    }

    fn x_span(&self, dim: usize) -> f64 {
        if self.is_x_independent() {
            0.0
        } else {
            self.clip * dim as f64
        }
    }

    /// `(inf, sup)` over `t ∈ [0, horizon]` and all x.
    pub fn bounds(&self, horizon: f64, dim: usize) -> (f64, f64) {
        let t_lo = self.constant + (self.rate_t * horizon).min(0.0);
        let t_hi = self.constant + (self.rate_t * horizon).max(0.0);
        let slope = if self.slope_x == Vector::ZERO {
            0.0
        } else {
            (self.slope_x[0].abs() + self.slope_x[1].abs()) * self.clip
        };
        let bil = if self.bilinear == 0.0 {
            0.0
        } else {
            self.bilinear.abs() * horizon * self.x_span(dim)
        };
        (t_lo - slope - bil, t_hi + slope + bil)
    }

    /// Lipschitz constant in `t`.
    pub fn lip_t(&self, dim: usize) -> f64 {
        if self.bilinear == 0.0 {
            return self.rate_t.abs();
        }
        self.rate_t.abs() + self.bilinear.abs() * self.x_span(dim)
    }

    /// Lipschitz constant in `x` (Euclidean).
    pub fn lip_x(&self, horizon: f64, dim: usize) -> f64 {
        self.slope_x.norm() + self.bilinear.abs() * horizon * (dim as f64).sqrt()
    }
}

/// Terminal cost ψ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Terminal {
    Zero,
    Constant { value: f64 },
    /// `amplitude · mean_k (1 − cos(frequency · x_k))`
    Cosine { amplitude: f64, frequency: f64 },
    /// `|x|`
    Abs,
}

impl Terminal {
    pub fn eval(&self, x: Vector, dim: usize) -> f64 {
        match *self {
            Terminal::Zero => 0.0,
            Terminal::Constant { value } => value,
            Terminal::Cosine { amplitude, frequency } => {
                let s: f64 = (0..dim).map(|k| 1.0 - (frequency * x[k]).cos()).sum();
                amplitude * s / dim as f64
            }
            Terminal::Abs => x.norm(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Terminal::Zero | Terminal::Constant { .. } => 0.0,
            Terminal::Cosine { amplitude, frequency } => (amplitude * frequency).abs(),
            Terminal::Abs => 1.0,
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_terminal() -> Terminal {
    Terminal::Zero
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangianSpec {
    pub running_cost: RunningCost,
    #[serde(default)]
    pub macro_term: MacroTerm,
    #[serde(default = "default_terminal")]
    pub terminal: Terminal,
    /// Oscillation allowance λ in the growth ratio γ.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl LagrangianSpec {
    pub fn new(running_cost: RunningCost) -> Self {
        LagrangianSpec {
            running_cost,
            macro_term: MacroTerm::default(),
            terminal: Terminal::Zero,
            lambda: 1.0,
        }
    }

    /// `L(t, x, y, u) = m(t, x) + V_ω(y) + ℓ(u)`.
    pub fn eval_l(&self, env: &EnvironmentHandle, t: f64, x: Vector, y: Vector, u: Vector) -> f64 {
        self.macro_term.eval(t, x) + env.evaluate(y) + self.running_cost.eval(u)
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dimension: usize,
    /// Final time T.
    pub horizon: f64,
    pub dynamics: DynamicsSpec,
    pub lagrangian: LagrangianSpec,
}

/// Radii scanned by the threshold searches.
fn radius_ladder() -> impl Iterator<Item = f64> {
    (0..=160).map(|k| 1e-3 * 2f64.powf(k as f64 / 4.0)).take_while(|&r| r <= 1e6 * 1.0001)
}

/// Outcome of the bounded-control threshold search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlThreshold {
    /// Step-1 level: controls above N occupy at most half of the interval.
    pub n: f64,
    /// Smallest admissible repair radius on the ladder.
    pub r: f64,
    /// Upper bound on the time-change rate β.
    pub beta_max: f64,
}

impl ModelSpec {
    pub fn new(dimension: usize, horizon: f64, dynamics: DynamicsSpec, lagrangian: LagrangianSpec) -> Self {
        ModelSpec {
            dimension,
            horizon,
            dynamics,
            lagrangian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dimension == 1 || self.dimension == 2) {
            return Err(Error::config("model.dimension", "must be 1 or 2"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("model.horizon", "must be positive"));
        }
        if !(self.lagrangian.lambda > 0.0) {
            return Err(Error::config("model.lagrangian.lambda", "must be positive"));
        }
        self.dynamics.validate()?;
        if let DynamicsSpec::UserTable(t) = &self.dynamics {
            if t.dimension() != self.dimension {
                return Err(Error::config("model.dynamics", "user table dimension mismatch"));
            }
        }
        if matches!(self.dynamics, DynamicsSpec::NoninjectiveToy) && self.dimension != 1 {
            return Err(Error::config("model.dynamics", "the non-injective toy is one-dimensional"));
        }
        let m = &self.lagrangian.macro_term;
        if !m.is_x_independent() && !m.clip.is_finite() {
            return Err(Error::config(
                "model.lagrangian.macro_term.clip",
                "x-dependent macro terms need a finite clip to stay bounded",
            ));
        }
        if let RunningCost::Power { coeff, beta } = self.lagrangian.running_cost {
            if !(coeff > 0.0 && beta > 0.0) {
                return Err(Error::config("model.lagrangian.running_cost", "coeff and beta must be positive"));
            }
        }
        Ok(())
    }

    pub fn eval_f(&self, x: Vector, u: Vector) -> Vector {
        self.dynamics.eval_f(x, u)
    }

    pub fn eval_l(&self, env: &EnvironmentHandle, t: f64, x: Vector, y: Vector, u: Vector) -> f64 {
        self.lagrangian.eval_l(env, t, x, y, u)
    }

    pub fn invert_dynamics(&self, x0: Vector, u: Vector, v: Vector) -> Result<Vector> {
        self.dynamics.invert_dynamics(x0, u, v, self.dimension)
    }

    pub fn zero_control(&self, x: Vector) -> Result<Vector> {
        self.dynamics.zero_control(x, self.dimension)
    }

    pub fn direction_control(&self, x: Vector, v_unit: Vector) -> Result<Vector> {
        self.dynamics.direction_control(x, v_unit, self.dimension)
    }

    pub fn psi(&self, x: Vector) -> f64 {
        self.lagrangian.terminal.eval(x, self.dimension)
    }

    /// `L_*` as a function of `|u|`.
    pub fn l_star_radius(&self, env: &EnvironmentHandle, r: f64) -> f64 {
        let (m_lo, _) = self.lagrangian.macro_term.bounds(self.horizon, self.dimension);
        m_lo + env.spec.amplitude_range[0] + self.lagrangian.running_cost.eval_radius(r)
    }

    pub fn l_star(&self, env: &EnvironmentHandle, u: Vector) -> f64 {
        let (m_lo, _) = self.lagrangian.macro_term.bounds(self.horizon, self.dimension);
        m_lo + env.spec.amplitude_range[0] + self.lagrangian.running_cost.eval(u)
    }

    /// `L^*(R)`: bound on `|L|` over `|u| ≤ R`.
    pub fn l_upper(&self, env: &EnvironmentHandle, r: f64) -> f64 {
        let (m_lo, m_hi) = self.lagrangian.macro_term.bounds(self.horizon, self.dimension);
        let [v_lo, v_hi] = env.spec.amplitude_range;
        let l0 = self.lagrangian.running_cost.eval_radius(0.0);
        let lr = self.lagrangian.running_cost.eval_radius(r);
        let hi = m_hi + v_hi + l0.max(lr);
        let lo = m_lo + v_lo + l0.min(lr);
        hi.abs().max(lo.abs())
    }

    /// ‖L‖_Lip: Lipschitz constant of L in t.
    pub fn lip_l_t(&self) -> f64 {
        self.lagrangian.macro_term.lip_t(self.dimension)
    }

    /// ‖L‖^R_Lip: Lipschitz constant of L in u on `|u| ≤ R`.
    pub fn lip_l_u(&self, r: f64) -> f64 {
        self.lagrangian.running_cost.lipschitz(r)
    }

    /// Modulus of continuity of L in its macroscopic x argument.
    pub fn m_l(&self, r: f64) -> f64 {
        self.lagrangian.macro_term.lip_x(self.horizon, self.dimension) * r
    }

    /// Modulus of `x ↦ L(t, x, x/ε, u)`, including the fast potential.
    pub fn m_l_at_scale(&self, env: &EnvironmentHandle, eps: f64, r: f64) -> f64 {
        self.m_l(r) + env.spec.lipschitz() * r / eps
    }

    pub fn m_psi(&self, r: f64) -> f64 {
        self.lagrangian.terminal.lipschitz() * r
    }

    pub fn f_star(&self, r: f64) -> f64 {
        self.dynamics.f_star(r)
    }

    /// Growth ratio `γ(u) = L_*(u) / f^*(|u| + λ)` as a function of `|u|`.
    pub fn gamma(&self, env: &EnvironmentHandle, r: f64) -> f64 {
        self.l_star_radius(env, r) / self.f_star(r + self.lagrangian.lambda)
    }

    /// `Θ(u) = J(u)^{-T} ∇L_*(u)`; NaN components where undefined.
    pub fn theta(&self, x: Vector, u: Vector) -> Vector {
        let g = self.lagrangian.running_cost.gradient(u);
        let j = self.dynamics.jacobian(x, u, self.dimension);
        if self.dimension == 1 {
            return Vector::new1(g[0] / j[0][0]);
        }
        // Solve Jᵀ θ = g.
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        Vector::new2(
            (j[1][1] * g[0] - j[1][0] * g[1]) / det,
            (-j[0][1] * g[0] + j[0][0] * g[1]) / det,
        )
    }

    /// Threshold search shared by [`ModelSpec::truncation_radius`] and the
    /// bounded-control repair. `w` is a cost-rate bound, `h` the interval
    /// length entering the Lipschitz-in-time term and `safety` multiplies the
    /// final growth inequality.
    pub fn control_threshold(&self, env: &EnvironmentHandle, w: f64, h: f64, safety: f64) -> Result<ControlThreshold> {
        let c0 = self.l_star_radius(env, 0.0);
        let w_excess = (w - c0).max(0.0);
        let n = radius_ladder()
            .find(|&r| self.l_star_radius(env, r) - c0 >= 2.0 * w_excess)
            .ok_or_else(|| {
                Error::CoercivityTooWeak(format!("no radius up to 1e6 has L_* − L_*(0) ≥ 2 · {w_excess}"))
            })?;
        let lambda = self.lagrangian.lambda;
        let delta = self.dynamics.delta();
        let m = self.dynamics.control_bound();
        let fn_ = self.f_star(n);
        let lip_h = self.dynamics.lip_h(n);
        let c_w = 5.0 * h * self.lip_l_t() + 4.0 * self.lip_l_u(n) * lip_h * fn_;
        let required = safety * (c_w + self.l_upper(env, m) - c0) / delta;
        let eta_n = self.dynamics.eta(n);
        // Shifted growth ratio at |u| = r − λ.
        let growth = |r: f64| (self.l_star_radius(env, r - lambda) - c0) / self.f_star(r);
        let ladder: Vec<f64> = radius_ladder().collect();
        for (k, &r) in ladder.iter().enumerate() {
            if r <= m || r < n + lambda {
                continue;
            }
            let g = growth(r);
            if !(g >= required) || !required.is_finite() {
                continue;
            }
            let beta_max = if w_excess == 0.0 { 0.0 } else { 2.0 * w_excess / (delta * g) };
            let case3_ok = if beta_max == 0.0 {
                true
            } else {
                beta_max < 0.5
                    && beta_max / (1.0 - beta_max) * fn_ < eta_n
                    && n + 2.0 * beta_max * lip_h * fn_ <= r
            };
            if !case3_ok {
                continue;
            }
            // The growth inequality must keep holding for every larger radius.
            if ladder[k..].iter().all(|&s| growth(s) >= required) {
                return Ok(ControlThreshold { n, r, beta_max });
            }
        }
        Err(Error::CoercivityTooWeak(format!(
            "no radius up to 1e6 satisfies the bounded-control inequalities for W = {w}"
        )))
    }

    /// Radius K beyond which controls can be ignored for cost rates up to
    /// `w` over the model horizon (safety factor 2).
    pub fn truncation_radius(&self, env: &EnvironmentHandle, w: f64) -> Result<f64> {
        if w < self.l_star_radius(env, 0.0) {
            return Err(Error::Domain(format!(
                "cost-rate bound {w} is below L_*(0) = {}",
                self.l_star_radius(env, 0.0)
            )));
        }
        Ok(self.control_threshold(env, w, self.horizon, 2.0)?.r)
    }

    /// Radius on which the sup defining `H(p)` is attained: beyond it
    /// `L_*(u) − f^*(|u|)|p|` exceeds the value at the zero control by 1.
    pub fn hamiltonian_radius(&self, env: &EnvironmentHandle, p: Vector) -> Result<f64> {
        let base = self.l_upper(env, self.dynamics.zero_control_bound()) + 1.0;
        let pn = p.norm();
        let ok = |r: f64| self.l_star_radius(env, r) - self.f_star(r) * pn > base;
        let ladder: Vec<f64> = radius_ladder().filter(|&r| r >= 0.5).collect();
        for (k, &r) in ladder.iter().enumerate() {
            if ok(r) && ladder[k..].iter().all(|&s| ok(s)) {
                return Ok(r);
            }
        }
        Err(Error::CoercivityTooWeak(format!("Hamiltonian sup is not attained for |p| = {pn}")))
    }

    /// Preimage of `v` inside `U^R`, trying several Newton seeds.
    fn preimage_in_ball(&self, x: Vector, v: Vector, r: f64, seeds: &[Vector]) -> Option<Vector> {
        seeds
            .iter()
            .filter_map(|&s| self.dynamics.inverse_near(x, s, v, self.dimension).ok())
            .find(|u| u.norm() <= r * (1.0 + 1e-9) + 1e-12)
    }

    /// Sampled verification of the eight standing assumptions.
    pub fn check_assumptions(&self, env: &EnvironmentHandle, plan: &SamplePlan) -> AssumptionReport {
        let mut checks = Vec::with_capacity(8);
        let d = self.dimension;
        let xs = &plan.x_samples;
        let us = plan.controls(d);
        let ys = plan.fast_points(d);
        let ts: Vec<f64> = (0..5).map(|k| self.horizon * k as f64 / 4.0).collect();

        // 1: exact translation covariance of the environment.
        let mut c = Check::new(1, "stationary environment: exact shift covariance");
        for (i, &y) in ys.iter().enumerate() {
            let r = ys[(i * 7 + 3) % ys.len()];
            let lhs = env.shift(r).evaluate(y);
            let rhs = env.evaluate(y + r);
            c.record((lhs - rhs).abs() - 1e-12 * (1.0 + env.spec.lipschitz()), || format!("y={y:?}, r={r:?}"));
        }
        checks.push(c.finish());

        // 2: growth and Lipschitz bounds of f.
        let mut c = Check::new(2, "dynamics: |f| ≤ f^*(|u|) and Lipschitz in (x, u)");
        let r = plan.control_radius;
        let lip = self.dynamics.lip_f(r);
        for &x in xs {
            for (k, &u) in us.iter().enumerate() {
                let fv = self.eval_f(x, u);
                c.record(fv.norm() - self.f_star(u.norm()) * (1.0 + 1e-12) - 1e-14, || format!("x={x:?}, u={u:?}"));
                let u2 = us[(k + 1) % us.len()];
                let x2 = xs[(k + 1) % xs.len()];
                let dist = (x - x2).norm() + (u - u2).norm();
                if dist > 0.0 {
                    let q = (fv - self.eval_f(x2, u2)).norm() / dist;
                    c.record(q - lip * (1.0 + 1e-9), || format!("pair x={x:?}, u={u:?}"));
                }
            }
        }
        checks.push(c.finish());

        // 3: boundedness of L on U^R.
        let mut c = Check::new(3, "Lagrangian bounded on U^R by L^*(R)");
        let bound = self.l_upper(env, r);
        for &t in &ts {
            for &x in xs {
                for (k, &u) in us.iter().enumerate() {
                    let y = ys[k % ys.len()];
                    let l = self.eval_l(env, t, x, y, u);
                    c.record(l.abs() - bound * (1.0 + 1e-12), || format!("t={t}, x={x:?}, u={u:?}"));
                }
            }
        }
        checks.push(c.finish());

        // 4: continuity moduli of L and ψ.
        let mut c = Check::new(4, "continuity: Lipschitz in t, modulus m_L in x, modulus m_ψ");
        for (k, &x) in xs.iter().enumerate() {
            let x2 = xs[(k + 1) % xs.len()];
            let dx = (x - x2).norm();
            for w in ts.windows(2) {
                let a = self.lagrangian.macro_term.eval(w[0], x);
                let b = self.lagrangian.macro_term.eval(w[1], x);
                c.record((a - b).abs() - self.lip_l_t() * (w[1] - w[0]) * (1.0 + 1e-9) - 1e-12, || {
                    format!("t∈[{}, {}], x={x:?}", w[0], w[1])
                });
                let ax = self.lagrangian.macro_term.eval(w[0], x2);
                c.record((a - ax).abs() - self.m_l(dx) * (1.0 + 1e-9) - 1e-12, || format!("x={x:?}, x'={x2:?}"));
            }
            let dpsi = (self.psi(x) - self.psi(x2)).abs();
            c.record(dpsi - self.m_psi(dx) * (1.0 + 1e-9) - 1e-12, || format!("ψ at x={x:?}, x'={x2:?}"));
        }
        checks.push(c.finish());

        // 5: a zero-velocity control exists with norm ≤ M̃ ≤ M.
        let mut c = Check::new(5, "zero-velocity control within M̃ ≤ M");
        let m_tilde = self.dynamics.zero_control_bound();
        let m = self.dynamics.control_bound();
        c.record(m_tilde - m, || "M̃ > M".to_string());
        for &x in xs {
            match self.zero_control(x) {
                Ok(u0) => {
                    c.record(self.eval_f(x, u0).norm() - 1e-10, || format!("x={x:?}"));
                    c.record(u0.norm() - m_tilde - 1e-10, || format!("|u0| at x={x:?}"));
                }
                Err(e) => c.fail(format!("x={x:?}: {e}")),
            }
        }
        checks.push(c.finish());

        // 6: local Lipschitz inverse on B_η(f(x, u)).
        let mut c = Check::new(6, "local inverse H on η-balls with Lipschitz bound");
        let dirs = plan.directions(d);
        for &x in xs {
            for (k, &u) in us.iter().enumerate() {
                let eta = self.dynamics.eta(u.norm());
                if !(eta > 0.0) {
                    c.fail(format!("η({}) = {eta} is not positive", u.norm()));
                    continue;
                }
                let fu = self.eval_f(x, u);
                let v = fu + dirs[k % dirs.len()] * (0.5 * eta.min(1.0));
                match self.invert_dynamics(x, u, v) {
                    Ok(w) => {
                        c.record((self.eval_f(x, w) - v).norm() - 1e-10, || format!("x={x:?}, u={u:?}"));
                        let lip_h = self.dynamics.lip_h(u.norm());
                        c.record((w - u).norm() - lip_h * (v - fu).norm() - 1e-10, || {
                            format!("Lipschitz at x={x:?}, u={u:?}")
                        });
                    }
                    Err(e) => c.fail(format!("x={x:?}, u={u:?}: {e}")),
                }
            }
        }
        checks.push(c.finish());

        // 7: lower envelope, growth γ → ∞ and the Θ inequality.
        let mut c = Check::new(7, "coercivity: L ≥ L_*, γ(u) → ∞, Θ inequality");
        for &t in &ts {
            for &x in xs {
                for (k, &u) in us.iter().enumerate() {
                    let y = ys[(k * 3) % ys.len()];
                    let l = self.eval_l(env, t, x, y, u);
                    c.record(self.l_star(env, u) - l - 1e-12, || format!("L < L_* at t={t}, x={x:?}, u={u:?}"));
                }
            }
        }
        let r_max = 1e6;
        let g_far = self.gamma(env, r_max);
        let g_near = self.gamma(env, r_max / 1000.0);
        if !(g_far >= 2.0 * g_near && g_far > 1.0) {
            c.fail(format!("γ does not grow: γ({}) = {g_near:.3e}, γ({r_max}) = {g_far:.3e}", r_max / 1000.0));
        }
        for &x in xs {
            for &u2 in &us {
                let th = self.theta(x, u2);
                if !th.is_finite() {
                    continue;
                }
                let f2 = self.eval_f(x, u2);
                let l2 = self.l_star(env, u2);
                for &u1 in &us {
                    let lhs = self.l_star(env, u1) - l2;
                    let rhs = th.dot(self.eval_f(x, u1) - f2);
                    let tol = 1e-8 * (1.0 + lhs.abs() + rhs.abs());
                    c.record(rhs - lhs - tol, || format!("Θ inequality at x={x:?}, u1={u1:?}, u2={u2:?}"));
                }
            }
        }
        checks.push(c.finish());

        // 8: convex image f(x, U^R), probed through midpoints.
        let mut c = Check::new(8, "convex velocity image f(x, U^R)");
        for &x in xs {
            for (k, &u1) in us.iter().enumerate() {
                let u2 = us[(k * 5 + 1) % us.len()];
                let mid = (self.eval_f(x, u1) + self.eval_f(x, u2)) * 0.5;
                let seeds = [(u1 + u2) * 0.5, u1, u2, Vector::ZERO];
                if self.preimage_in_ball(x, mid, r, &seeds).is_none() {
                    c.fail(format!("midpoint of f(x, {u1:?}) and f(x, {u2:?}) not reached within |u| ≤ {r}"));
                }
            }
        }
        checks.push(c.finish());

        AssumptionReport { checks }
    }
}

/// Deterministic sample grids for [`ModelSpec::check_assumptions`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePlan {
    pub x_samples: Vec<Vector>,
    pub control_radius: f64,
    /// Control grid points per axis over `[−R, R]^d` (clipped to the ball).
    pub controls_per_axis: usize,
    pub fast_samples: usize,
    pub fast_box: f64,
}

impl SamplePlan {
    /// Grid of `n` points per axis over `[lo, hi]^d`.
    pub fn on_box(dim: usize, lo: f64, hi: f64, n: usize, control_radius: f64) -> Self {
        let pts: Vec<f64> = (0..n.max(2)).map(|i| lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64).collect();
        let x_samples = if dim == 1 {
            pts.iter().map(|&a| Vector::new1(a)).collect()
        } else {
            pts.iter().flat_map(|&a| pts.iter().map(move |&b| Vector::new2(a, b))).collect()
        };
        SamplePlan {
            x_samples,
            control_radius,
            controls_per_axis: if dim == 1 { 41 } else { 13 },
            fast_samples: 64,
            fast_box: 10.0,
        }
    }

    fn controls(&self, dim: usize) -> Vec<Vector> {
        let n = self.controls_per_axis.max(2);
        let r = self.control_radius;
        let pts: Vec<f64> = (0..n).map(|i| -r + 2.0 * r * i as f64 / (n - 1) as f64).collect();
        if dim == 1 {
            pts.iter().map(|&a| Vector::new1(a)).collect()
        } else {
            pts.iter()
                .flat_map(|&a| pts.iter().map(move |&b| Vector::new2(a, b)))
                .filter(|u| u.norm() <= r * (1.0 + 1e-12))
                .collect()
        }
    }

    fn fast_points(&self, dim: usize) -> Vec<Vector> {
        (0..self.fast_samples.max(2))
            .map(|k| {
                let a = crate::hash::unit_open(crate::hash::mix64(k as u64)) * self.fast_box;
                let b = crate::hash::unit_open(crate::hash::mix64(k as u64 ^ 0xABCD)) * self.fast_box;
                if dim == 1 {
                    Vector::new1(a)
                } else {
                    Vector::new2(a, b)
                }
            })
            .collect()
    }

    fn directions(&self, dim: usize) -> Vec<Vector> {
        if dim == 1 {
            vec![Vector::new1(1.0), Vector::new1(-1.0)]
        } else {
            (0..8)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / 8.0;
                    Vector::new2(a.cos(), a.sin())
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub index: usize,
    pub name: String,
    pub passed: bool,
    /// Largest sampled violation (≤ 0 when every sample passed).
    pub worst_violation: f64,
    pub location: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, index: usize) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.index == index)
    }
}

struct Check {
    index: usize,
    name: &'static str,
    worst: f64,
    location: String,
    failed: bool,
}

impl Check {
    fn new(index: usize, name: &'static str) -> Self {
        Check {
            index,
            name,
            worst: f64::NEG_INFINITY,
            location: String::new(),
            failed: false,
        }
    }

    /// Records a sampled violation; positive values fail the check.
    fn record(&mut self, violation: f64, at: impl FnOnce() -> String) {
        let v = if violation.is_nan() { f64::INFINITY } else { violation };
        if v > self.worst {
            self.worst = v;
            self.location = at();
        }
        if v > 0.0 {
            self.failed = true;
        }
    }

    fn fail(&mut self, what: String) {
        self.failed = true;
        self.worst = f64::INFINITY;
        self.location = what;
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            index: self.index,
            name: self.name.to_string(),
            passed: !self.failed,
            worst_violation: if self.worst == f64::NEG_INFINITY { 0.0 } else { self.worst },
            location: self.location,
        }
    }
}
