//! Stationary random potentials `V_ω(y)` with an exact translation operator.
//!
//! Three field kinds are provided:
//!
//! ```text
//! periodic      V(y) = v_min + A (1 − cos(2π y / P)),     A = (v_max − v_min)/2
//!               (2-D: the average of the two axis cosines)
//! checkerboard  i.i.d. uniform amplitudes per cell of side s, blended
//!               linearly across a band of width margin·s around cell faces
//! shot_noise    V(y) = v_min + (v_max − v_min)(1 − exp(−Σ_k a_k φ(|y − p_k|/ρ)))
//! ```
//!
//! Randomness is counter-based: every cell or subcell draws its data from a
//! hash of `(seed, stream, index)`, so a handle holds no state beyond its
//! spec, seed and accumulated offset. Shot-noise points are quantised to one
//! Bernoulli-thinned candidate per subcell, which keeps the law exactly
//! invariant under subcell-lattice shifts.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash::{hash_cell, tag, unit_open};
use crate::{Error, Result, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Periodic,
    Checkerboard,
    ShotNoise,
}

/// Radial profile of a shot-noise bump, as a function of `r = |y − p|/ρ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpProfile {
    /// `(1 + cos(π r)) / 2`
    #[default]
    Cosine,
    /// `(1 − r²)²`
    Bump,
}

impl BumpProfile {
    fn value(self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        match self {
            BumpProfile::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * r).cos()),
            BumpProfile::Bump => {
                let s = 1.0 - r * r;
                s * s
            }
        }
    }

    /// Sup of `|φ'(r)|`.
    fn max_slope(self) -> f64 {
        match self {
            BumpProfile::Cosine => std::f64::consts::FRAC_PI_2,
            BumpProfile::Bump => 8.0 / (3.0 * 3f64.sqrt()),
        }
    }
}

fn default_margin() -> f64 {
    0.1
}

fn default_intensity() -> f64 {
    1.0
}

fn default_bump_radius() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub kind: FieldKind,
    /// Period (periodic) or cell side (checkerboard). Ignored by shot noise.
    #[serde(default = "one")]
    pub length: f64,
    /// `[v_min, v_max]`.
    pub amplitude_range: [f64; 2],
    #[serde(default)]
    pub bump_profile: BumpProfile,
    /// Expected shot-noise points per unit volume.
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    /// Shot-noise bump radius ρ.
    #[serde(default = "default_bump_radius")]
    pub bump_radius: f64,
    /// Shot-noise subcell side; defaults to the largest side keeping the
    /// thinning probability at or below 1/2 and the side at most ρ/2.
    #[serde(default)]
    pub subcell: Option<f64>,
    /// Checkerboard blending band as a fraction of the cell side.
    #[serde(default = "default_margin")]
    pub blend_margin: f64,
    pub dimension: usize,
}

fn one() -> f64 {
    1.0
}

impl EnvironmentSpec {
    pub fn periodic(period: f64, v_min: f64, v_max: f64, dimension: usize) -> Self {
        EnvironmentSpec {
            kind: FieldKind::Periodic,
            length: period,
            amplitude_range: [v_min, v_max],
            bump_profile: BumpProfile::Cosine,
            intensity: default_intensity(),
            bump_radius: default_bump_radius(),
            subcell: None,
            blend_margin: default_margin(),
            dimension,
        }
    }

    /// A field identically equal to `c`.
    pub fn constant(c: f64, dimension: usize) -> Self {
        Self::periodic(1.0, c, c, dimension)
    }

    pub fn checkerboard(cell: f64, v_min: f64, v_max: f64, dimension: usize) -> Self {
        EnvironmentSpec {
            kind: FieldKind::Checkerboard,
            length: cell,
            ..Self::periodic(1.0, v_min, v_max, dimension)
        }
    }

    pub fn shot_noise(intensity: f64, bump_radius: f64, v_min: f64, v_max: f64, dimension: usize) -> Self {
        EnvironmentSpec {
            kind: FieldKind::ShotNoise,
            intensity,
            bump_radius,
            ..Self::periodic(1.0, v_min, v_max, dimension)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.amplitude_range;
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config("environment.amplitude_range", "bounds must be finite"));
        }
        if lo > hi {
            return Err(Error::config("environment.amplitude_range", "v_min must not exceed v_max"));
        }
        if !(self.dimension == 1 || self.dimension == 2) {
            return Err(Error::config("environment.dimension", "must be 1 or 2"));
        }
        match self.kind {
            FieldKind::Periodic | FieldKind::Checkerboard => {
                if !(self.length > 0.0 && self.length.is_finite()) {
                    return Err(Error::config("environment.length", "must be positive"));
                }
            }
            FieldKind::ShotNoise => {
                if !(self.intensity > 0.0 && self.intensity.is_finite()) {
                    return Err(Error::config("environment.intensity", "must be positive"));
                }
                if !(self.bump_radius > 0.0 && self.bump_radius.is_finite()) {
                    return Err(Error::config("environment.bump_radius", "must be positive"));
                }
                if let Some(q) = self.subcell {
                    if !(q > 0.0) {
                        return Err(Error::config("environment.subcell", "must be positive"));
                    }
                    if self.intensity * q.powi(self.dimension as i32) > 1.0 {
                        return Err(Error::config(
                            "environment.subcell",
                            "intensity · subcell^d must not exceed 1",
                        ));
                    }
                }
            }
        }
        if self.kind == FieldKind::Checkerboard && !(self.blend_margin > 0.0 && self.blend_margin <= 1.0) {
            return Err(Error::config("environment.blend_margin", "must lie in (0, 1]"));
        }
        Ok(())
    }

    fn subcell_side(&self) -> f64 {
        self.subcell.unwrap_or_else(|| {
            let by_density = (0.5 / self.intensity).powf(1.0 / self.dimension as f64);
            by_density.min(0.5 * self.bump_radius)
        })
    }

    /// Lipschitz bound of the field, used as the y-part of the modulus m_L.
    pub fn lipschitz(&self) -> f64 {
        let span = self.amplitude_range[1] - self.amplitude_range[0];
        match self.kind {
            FieldKind::Periodic => span * std::f64::consts::PI / self.length,
            FieldKind::Checkerboard => {
                let per_axis = span / (self.blend_margin * self.length);
                per_axis * (self.dimension as f64).sqrt()
            }
            FieldKind::ShotNoise => {
                let q = self.subcell_side();
                let per_axis = (2.0 * self.bump_radius / q).ceil() + 1.0;
                let max_points = per_axis.powi(self.dimension as i32);
                span * max_points * self.bump_profile.max_slope() / self.bump_radius
            }
        }
    }
}

/// A realisation of the field: `evaluate(y) = V_seed(y + offset)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentHandle {
    pub spec: EnvironmentSpec,
    pub seed: u64,
    pub offset: Vector,
}

/// Validates `spec` and returns the unshifted realisation for `seed`.
pub fn create_environment(spec: EnvironmentSpec, seed: u64) -> Result<EnvironmentHandle> {
    spec.validate()?;
    Ok(EnvironmentHandle {
        spec,
        seed,
        offset: Vector::ZERO,
    })
}

const STREAM_CHECKER: &str = "checkerboard";
const STREAM_POINTS: &str = "shot-noise";
const STREAM_MEAN: &str = "mean";

impl EnvironmentHandle {
    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    /// `φ_r ω`: a handle whose field is this one translated by `r`.
    pub fn shift(&self, r: Vector) -> EnvironmentHandle {
        EnvironmentHandle {
            offset: self.offset + r,
            ..self.clone()
        }
    }

    pub fn evaluate(&self, y: Vector) -> f64 {
        let z = y + self.offset;
        let [lo, hi] = self.spec.amplitude_range;
        match self.spec.kind {
            FieldKind::Periodic => {
                let a = 0.5 * (hi - lo);
                let w = std::f64::consts::TAU / self.spec.length;
                let c = if self.spec.dimension == 1 {
                    (w * z[0]).cos()
                } else {
                    0.5 * ((w * z[0]).cos() + (w * z[1]).cos())
                };
                lo + a * (1.0 - c)
            }
            FieldKind::Checkerboard => self.checkerboard(z),
            FieldKind::ShotNoise => {
                let s = self.shot_noise_sum(z);
                lo + (hi - lo) * (-(-s).exp_m1())
            }
        }
    }

    fn checker_amplitude(&self, i: i64, j: i64) -> f64 {
        let [lo, hi] = self.spec.amplitude_range;
        lo + (hi - lo) * unit_open(hash_cell(self.seed, tag(STREAM_CHECKER), i, j))
    }

    fn checkerboard(&self, z: Vector) -> f64 {
        let half = 0.5 * self.spec.blend_margin;
        // Per axis: two cell indices and the weight of the second one.
        let blend = |c: f64| -> (i64, i64, f64) {
            let xi = c / self.spec.length;
            let k = xi.floor();
            let frac = xi - k;
            let k = k as i64;
            if frac < half {
                (k - 1, k, 0.5 + frac / self.spec.blend_margin)
            } else if frac > 1.0 - half {
                (k, k + 1, 0.5 - (1.0 - frac) / self.spec.blend_margin)
            } else {
                (k, k, 0.0)
            }
        };
        let (a0, a1, wa) = blend(z[0]);
        if self.spec.dimension == 1 {
            return (1.0 - wa) * self.checker_amplitude(a0, 0) + wa * self.checker_amplitude(a1, 0);
        }
        let (b0, b1, wb) = blend(z[1]);
        let row = |b: i64| (1.0 - wa) * self.checker_amplitude(a0, b) + wa * self.checker_amplitude(a1, b);
        (1.0 - wb) * row(b0) + wb * row(b1)
    }

    /// Candidate point of subcell `(i, j)`: position and amplitude, if kept.
    fn subcell_point(&self, i: i64, j: i64, q: f64, keep: f64) -> Option<(Vector, f64)> {
        let base = hash_cell(self.seed, tag(STREAM_POINTS), i, j);
        if unit_open(base) > keep {
            return None;
        }
        let px = (i as f64 + unit_open(crate::hash::mix64(base ^ 1))) * q;
        let py = if self.spec.dimension == 2 {
            (j as f64 + unit_open(crate::hash::mix64(base ^ 2))) * q
        } else {
            0.0
        };
        Some((Vector::new2(px, py), unit_open(crate::hash::mix64(base ^ 3))))
    }

    fn shot_noise_sum(&self, z: Vector) -> f64 {
        let q = self.spec.subcell_side();
        let keep = self.spec.intensity * q.powi(self.spec.dimension as i32);
        let rho = self.spec.bump_radius;
        let range = |c: f64| ((c - rho) / q).floor() as i64..=((c + rho) / q).floor() as i64;
        let rows = if self.spec.dimension == 2 { range(z[1]) } else { 0..=0 };
        let mut s = 0.0;
        for j in rows {
            for i in range(z[0]) {
                if let Some((p, a)) = self.subcell_point(i, j, q, keep) {
                    s += a * self.spec.bump_profile.value((z - p).norm() / rho);
                }
            }
        }
        s
    }

    /// Monte-Carlo mean of the field over `[0, box_side]^d` (relative to the
    /// handle's frame), with a sample stream derived from the seed.
    pub fn estimate_spatial_mean(&self, box_side: f64, n_samples: usize) -> Result<f64> {
        if !(box_side > 0.0) {
            return Err(Error::Domain("box_side must be positive".into()));
        }
        if n_samples == 0 {
            return Err(Error::Domain("n_samples must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash_cell(self.seed, tag(STREAM_MEAN), 0, 0));
        let d = self.spec.dimension;
        let mut acc = 0.0;
        for _ in 0..n_samples {
            let x = rng.random::<f64>() * box_side;
            let y = if d == 2 { rng.random::<f64>() * box_side } else { 0.0 };
            acc += self.evaluate(Vector::new2(x, y));
        }
        Ok(acc / n_samples as f64)
    }

    /// CSV dump of the field on a uniform grid over `[lo, hi]^d`.
    pub fn dump_csv(&self, lo: f64, hi: f64, n: usize) -> String {
        let n = n.max(2);
        let step = (hi - lo) / (n - 1) as f64;
        let mut out = String::new();
        if self.spec.dimension == 1 {
            out.push_str("y,value\n");
            for i in 0..n {
                let y = lo + i as f64 * step;
                let _ = writeln!(out, "{},{}", y, self.evaluate(Vector::new1(y)));
            }
        } else {
            out.push_str("y1,y2,value\n");
            for i in 0..n {
                for j in 0..n {
                    let p = Vector::new2(lo + i as f64 * step, lo + j as f64 * step);
                    let _ = writeln!(out, "{},{},{}", p[0], p[1], self.evaluate(p));
                }
            }
        }
        out
    }
}
