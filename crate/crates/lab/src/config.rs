//! Experiment configuration: TOML (or the equivalent JSON) deserialised into
//! the core specs plus the grids and sweeps that drive a run.

use std::path::{Path, PathBuf};

use homogenize_core::cell::{MicroGrid, TableLattice, MIN_B_SCHEDULE_LEN};
use homogenize_core::env::EnvironmentSpec;
use homogenize_core::interp::Axis;
use homogenize_core::model::{ModelSpec, SamplePlan};
use homogenize_core::solve::GridSpec;
use homogenize_core::xform::{HamiltonianLattice, HjbOptions};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub environment: EnvironmentSpec,
    pub grids: Grids,
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    /// `[lo, hi]` per spatial axis.
    pub space_box: Vec<[f64; 2]>,
    /// Radius of the control ball searched by the value-function solvers.
    pub control_radius: f64,
    pub fine: FineGrid,
    pub homogenized: MacroGrid,
    pub table: TableGrid,
    pub hjb: HjbGrid,
}

fn quarter() -> f64 {
    0.25
}

fn unit() -> f64 {
    1.0
}

/// Fine grids scale with ε: `dx = dx_per_eps · ε`, `dt = courant · dx / f*(K)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineGrid {
    #[serde(default = "quarter")]
    pub dx_per_eps: f64,
    #[serde(default = "unit")]
    pub courant: f64,
    /// Control nodes per axis over `[−K, K]`.
    pub control_grid_n: usize,
}

/// `dt = courant · dx / f*(K)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroGrid {
    pub dx: f64,
    #[serde(default = "unit")]
    pub courant: f64,
    pub control_grid_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableGrid {
    pub t: Axis,
    pub x: Vec<Axis>,
    pub u: Vec<Axis>,
    pub micro: MicroGrid,
}

fn default_samples() -> usize {
    129
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbGrid {
    /// Momentum axes of the tabulated H̃; t and x reuse the L̃ table axes.
    pub p: Vec<Axis>,
    pub dt: f64,
    #[serde(default)]
    pub p_max: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Strictly decreasing.
    pub eps: Vec<f64>,
    /// Macro steps for the frozen-versus-released cell comparison.
    #[serde(default)]
    pub tau: Vec<f64>,
    pub b_schedule: Vec<f64>,
}

impl ExperimentConfig {
    /// Reads, parses and validates a config; `.json` files are parsed as
    /// JSON, everything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config {
            path: path.to_path_buf(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| LabError::Config {
            path: path.to_path_buf(),
            message,
        };
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg: ExperimentConfig = if is_json {
            serde_json::from_str(text).map_err(|e| err(format!("line {}: {e}", e.line())))?
        } else {
            toml::from_str(text).map_err(|e| err(e.to_string().trim_end().to_string()))?
        };
        cfg.validate().map_err(|(field, reason)| {
            let line = locate(text, &field).map(|l| format!("line {l}: ")).unwrap_or_default();
            err(format!("{line}invalid `{field}`: {reason}"))
        })?;
        Ok(cfg)
    }

    /// Field path and reason of the first violated constraint.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        fn bad(field: &str, reason: &str) -> std::result::Result<(), (String, String)> {
            Err((field.to_string(), reason.to_string()))
        }
        let from_core = |prefix: &str, e: homogenize_core::Error| match e {
            homogenize_core::Error::Config { field, reason } => {
                let field = if field.starts_with(prefix) { field } else { format!("{prefix}.{field}") };
                (field, reason)
            }
            other => (prefix.to_string(), other.to_string()),
        };

        if self.seeds.is_empty() {
            return bad("seeds", "needs at least one seed");
        }
        if self.workers == Some(0) {
            return bad("workers", "must be at least 1");
        }
        let s = &self.sweep;
        if s.eps.is_empty() {
            return bad("sweep.eps", "needs at least one value");
        }
        if s.eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("sweep.eps", "every ε must be positive");
        }
        if s.eps.windows(2).any(|w| w[1] >= w[0]) {
            return bad("sweep.eps", "must be strictly decreasing");
        }
        if s.tau.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return bad("sweep.tau", "every τ must be positive");
        }
        if s.b_schedule.len() < MIN_B_SCHEDULE_LEN {
            return bad("sweep.b_schedule", &format!("needs at least {MIN_B_SCHEDULE_LEN} horizons"));
        }
        if s.b_schedule.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return bad("sweep.b_schedule", "needs positive horizons");
        }
        if s.b_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return bad("sweep.b_schedule", "must be strictly increasing");
        }

        self.model.validate().map_err(|e| from_core("model", e))?;
        self.environment.validate().map_err(|e| from_core("environment", e))?;
        let dim = self.model.dimension;
        if self.environment.dimension != dim {
            return bad("environment.dimension", "must match model.dimension");
        }

        let g = &self.grids;
        if g.space_box.len() != dim {
            return bad("grids.space_box", "needs one [lo, hi] pair per dimension");
        }
        if g.space_box.iter().any(|[lo, hi]| !(lo < hi && lo.is_finite() && hi.is_finite())) {
            return bad("grids.space_box", "needs lo < hi");
        }
        if !(g.control_radius > 0.0 && g.control_radius.is_finite()) {
            return bad("grids.control_radius", "must be positive");
        }
        if !(g.fine.dx_per_eps > 0.0) {
            return bad("grids.fine.dx_per_eps", "must be positive");
        }
        if !(g.fine.courant > 0.0 && g.fine.courant <= 1.0) {
            return bad("grids.fine.courant", "must lie in (0, 1]");
        }
        if g.fine.control_grid_n < 1 {
            return bad("grids.fine.control_grid_n", "must be at least 1");
        }
        if !(g.homogenized.dx > 0.0) {
            return bad("grids.homogenized.dx", "must be positive");
        }
        if !(g.homogenized.courant > 0.0 && g.homogenized.courant <= 1.0) {
            return bad("grids.homogenized.courant", "must lie in (0, 1]");
        }
        if g.homogenized.control_grid_n < 1 {
            return bad("grids.homogenized.control_grid_n", "must be at least 1");
        }
        let lattice = self.table_lattice();
        lattice.validate(dim).map_err(|e| from_core("grids.table", e))?;
        let m = &g.table.micro;
        if !(m.micro_dt > 0.0) {
            return bad("grids.table.micro.micro_dt", "must be positive");
        }
        if !(m.micro_lattice > 0.0) {
            return bad("grids.table.micro.micro_lattice", "must be positive");
        }
        if !(m.control_radius > 0.0) {
            return bad("grids.table.micro.control_radius", "must be positive");
        }
        let k = m.control_radius;
        if s.tau.iter().any(|&t| t * self.model.f_star(k) > self.model.dynamics.eta(k)) {
            return bad("sweep.tau", "τ·f*(K) exceeds η(K) for the micro control radius");
        }
        if g.hjb.p.len() != dim {
            return bad("grids.hjb.p", "needs one axis per dimension");
        }
        for a in &g.hjb.p {
            a.validate("grids.hjb.p").map_err(|e| from_core("grids.hjb.p", e))?;
        }
        if !(g.hjb.dt > 0.0) {
            return bad("grids.hjb.dt", "must be positive");
        }
        if g.hjb.p_max.is_some_and(|p| !(p > 0.0)) {
            return bad("grids.hjb.p_max", "must be positive");
        }
        for eps in &s.eps {
            self.fine_grid(*eps).validate(&self.model).map_err(|e| from_core("grids.fine", e))?;
        }
        self.homogenized_grid()
            .validate(&self.model)
            .map_err(|e| from_core("grids.homogenized", e))?;
        Ok(())
    }

    fn dt_for(&self, dx: f64, courant: f64) -> f64 {
        courant * dx / self.model.f_star(self.grids.control_radius).max(1e-12)
    }

    pub fn fine_grid(&self, eps: f64) -> GridSpec {
        let f = &self.grids.fine;
        let dx = f.dx_per_eps * eps;
        GridSpec {
            t_start: 0.0,
            horizon: self.model.horizon,
            dt: self.dt_for(dx, f.courant),
            space_box: self.grids.space_box.clone(),
            dx,
            control_radius: self.grids.control_radius,
            control_grid_n: f.control_grid_n,
        }
    }

    pub fn homogenized_grid(&self) -> GridSpec {
        let h = &self.grids.homogenized;
        GridSpec {
            t_start: 0.0,
            horizon: self.model.horizon,
            dt: self.dt_for(h.dx, h.courant),
            space_box: self.grids.space_box.clone(),
            dx: h.dx,
            control_radius: self.grids.control_radius,
            control_grid_n: h.control_grid_n,
        }
    }

    pub fn hjb_grid(&self) -> GridSpec {
        GridSpec {
            dt: self.grids.hjb.dt,
            ..self.homogenized_grid()
        }
    }

    pub fn hjb_options(&self) -> HjbOptions {
        HjbOptions {
            p_max: self.grids.hjb.p_max,
            samples: self.grids.hjb.samples,
        }
    }

    pub fn table_lattice(&self) -> TableLattice {
        let t = &self.grids.table;
        TableLattice {
            t: t.t.clone(),
            x: t.x.clone(),
            u: t.u.clone(),
        }
    }

    pub fn hamiltonian_lattice(&self) -> HamiltonianLattice {
        let t = &self.grids.table;
        HamiltonianLattice {
            t: t.t.clone(),
            x: t.x.clone(),
            p: self.grids.hjb.p.clone(),
        }
    }

    /// Central half of the space box along every axis.
    pub fn compact_set(&self) -> Vec<[f64; 2]> {
        self.grids
            .space_box
            .iter()
            .map(|&[lo, hi]| {
                let (c, w) = (0.5 * (lo + hi), 0.25 * (hi - lo));
                [c - w, c + w]
            })
            .collect()
    }

    pub fn sample_plan(&self) -> SamplePlan {
        let [lo, hi] = self.compact_set()[0];
        SamplePlan::on_box(self.model.dimension, lo, hi, 5, self.grids.control_radius)
    }
}

/// 1-based line of the key named by the last segment of `field`, searched
/// after the header of its enclosing table when that header exists.
fn locate(text: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", field),
    };
    let lines: Vec<&str> = text.lines().collect();
    let start = if section.is_empty() {
        0
    } else {
        let header = format!("[{section}]");
        lines.iter().position(|l| l.trim() == header).map_or(0, |i| i + 1)
    };
    lines[start..]
        .iter()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| start + i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_finds_key_inside_its_section() {
        let text = "eps = 1\n[sweep]\nb = 2\neps = [0.1]\n";
        assert_eq!(locate(text, "sweep.eps"), Some(4));
        assert_eq!(locate(text, "eps"), Some(1));
        assert_eq!(locate(text, "sweep.tau"), None);
    }
}
