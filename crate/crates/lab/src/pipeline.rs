//! Stage orchestration. Every stage reads its inputs from and writes its
//! outputs to the output directory, so stages can be rerun one at a time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use homogenize_core::cell::{
    build_table, macro_cell_cost, released_macro_cell_cost, stationary_gap_bound, CellOptions,
    EffectiveLagrangianTable,
};
use homogenize_core::env::{create_environment, EnvironmentHandle};
use homogenize_core::io::{self, num};
use homogenize_core::model::AssumptionReport;
use homogenize_core::parallel::with_workers;
use homogenize_core::solve::{solve_fine, solve_homogenized, sup_gap, ValueField};
use homogenize_core::xform::{effective_hamiltonian, solve_hjb, HamiltonianTable};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    CheckAssumptions,
    Table,
    Solve,
    Hjb,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::CheckAssumptions, Stage::Table, Stage::Solve, Stage::Hjb, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::CheckAssumptions => "check-assumptions",
            Stage::Table => "table",
            Stage::Solve => "solve",
            Stage::Hjb => "hjb",
            Stage::Report => "report",
        }
    }
}

/// File names inside an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn assumptions(&self) -> PathBuf {
        self.root.join("assumptions.json")
    }

    pub fn environment(&self, seed: u64) -> PathBuf {
        self.root.join(format!("env_seed{seed}.csv"))
    }

    pub fn table(&self, seed: u64) -> PathBuf {
        self.root.join(format!("table_seed{seed}.csv"))
    }

    pub fn fine(&self, eps: f64) -> PathBuf {
        self.root.join(format!("fine_eps{}.csv", num(eps)))
    }

    pub fn homogenized(&self) -> PathBuf {
        self.root.join("homogenized.csv")
    }

    pub fn cell_gaps(&self) -> PathBuf {
        self.root.join("cell_gaps.csv")
    }

    pub fn hamiltonian(&self) -> PathBuf {
        self.root.join("hamiltonian.csv")
    }

    pub fn hjb(&self) -> PathBuf {
        self.root.join("hjb.csv")
    }

    pub fn seed_discrepancy(&self) -> PathBuf {
        self.root.join("seed_discrepancy.csv")
    }

    pub fn convergence(&self) -> PathBuf {
        self.root.join("convergence.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

// ---------------------------------------------------------------------------
// Stage kernels, shared by `run` and the single-stage subcommands

pub fn environment(cfg: &ExperimentConfig, seed: u64) -> Result<EnvironmentHandle> {
    create_environment(cfg.environment.clone(), seed).map_err(LabError::stage("gen-env"))
}

/// Field samples over a window of twenty correlation lengths.
pub fn environment_csv(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let env = environment(cfg, seed)?;
    let scale = match cfg.environment.kind {
        homogenize_core::env::FieldKind::ShotNoise => cfg.environment.bump_radius,
        _ => cfg.environment.length,
    };
    let n = if cfg.model.dimension == 1 { 1001 } else { 101 };
    Ok(env.dump_csv(0.0, 20.0 * scale, n))
}

pub fn check_assumptions(cfg: &ExperimentConfig) -> Result<AssumptionReport> {
    let env = environment(cfg, cfg.seeds[0])?;
    Ok(cfg.model.check_assumptions(&env, &cfg.sample_plan()))
}

pub fn table(cfg: &ExperimentConfig, seed: u64) -> Result<EffectiveLagrangianTable> {
    let env = environment(cfg, seed)?;
    let hash = io::model_hash(&cfg.model, &cfg.environment).map_err(LabError::stage("table"))?;
    build_table(
        &cfg.model,
        &env,
        &cfg.table_lattice(),
        &cfg.grids.table.micro,
        &cfg.sweep.b_schedule,
        hash,
    )
    .map_err(LabError::stage("table"))
}

pub fn fine(cfg: &ExperimentConfig, eps: f64) -> Result<ValueField> {
    let env = environment(cfg, cfg.seeds[0])?;
    solve_fine(&cfg.model, &env, eps, &cfg.fine_grid(eps)).map_err(LabError::stage("solve"))
}

pub fn homogenized(cfg: &ExperimentConfig, table: &EffectiveLagrangianTable) -> Result<ValueField> {
    solve_homogenized(&cfg.model, table, &cfg.homogenized_grid()).map_err(LabError::stage("solve"))
}

pub fn hamiltonian(cfg: &ExperimentConfig, table: &EffectiveLagrangianTable) -> Result<HamiltonianTable> {
    HamiltonianTable::build(cfg.hamiltonian_lattice(), true, &|t, x, p| {
        effective_hamiltonian(&cfg.model, table, t, x, p)
    })
    .map_err(LabError::stage("hjb"))
}

pub fn hjb(cfg: &ExperimentConfig, h: &HamiltonianTable) -> Result<ValueField> {
    let grid = cfg.hjb_grid();
    let space = grid.space();
    let terminal: Vec<f64> = (0..space.len()).map(|i| cfg.model.psi(grid.node(i))).collect();
    solve_hjb(&|t, x, p| h.value(t, x, p), &grid, &terminal, cfg.hjb_options()).map_err(LabError::stage("hjb"))
}

/// Frozen against released cell costs at every table node, for each τ of
/// the sweep at the smallest ε.
pub fn cell_gaps(cfg: &ExperimentConfig) -> Result<String> {
    let d = cfg.model.dimension;
    let env = environment(cfg, cfg.seeds[0])?;
    let eps = *cfg.sweep.eps.last().expect("validated non-empty");
    let lattice = cfg.table_lattice();
    let micro = &cfg.grids.table.micro;
    let mut rows = Vec::new();
    for &tau in &cfg.sweep.tau {
        let bound = stationary_gap_bound(&cfg.model, tau, micro.control_radius);
        for i in 0..lattice.grid().len() {
            let (t, x, u) = lattice.node(i);
            let opts = CellOptions::fast();
            let frozen = macro_cell_cost(&cfg.model, &env, t, x, u, tau, eps, micro, opts);
            let released = released_macro_cell_cost(&cfg.model, &env, t, x, u, tau, eps, micro, opts);
            let (a, b) = match (frozen, released) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(homogenize_core::Error::Infeasible(_)), _) | (_, Err(homogenize_core::Error::Infeasible(_))) => {
                    continue
                }
                (Err(e), _) | (_, Err(e)) => return Err(LabError::stage("solve")(e)),
            };
            let mut row = vec![num(tau), num(eps), num(t)];
            row.extend((0..d).map(|k| num(x[k])));
            row.extend((0..d).map(|k| num(u[k])));
            row.extend([
                num(a.value),
                num(b.value),
                num((a.value - b.value).abs()),
                num(bound),
                num(a.dp_tolerance + b.dp_tolerance),
            ]);
            rows.push(row);
        }
    }
    let mut cols: Vec<String> = ["tau", "eps", "t"].map(String::from).to_vec();
    cols.extend(io::axis_names("x", d));
    cols.extend(io::axis_names("u", d));
    cols.extend(["frozen", "released", "gap", "bound", "tolerance"].map(String::from));
    io::write_document("cell-gaps", &(), &cols, &rows).map_err(LabError::stage("solve"))
}

/// Per-node differences between the tables of every pair of seeds.
pub fn seed_discrepancy(tables: &[EffectiveLagrangianTable]) -> Result<(String, Vec<SeedPair>)> {
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    let d = tables.first().map_or(1, |t| t.lattice.dimension());
    for (i, a) in tables.iter().enumerate() {
        for b in &tables[i + 1..] {
            if a.lattice != b.lattice {
                return Err(LabError::stage("report")(homogenize_core::Error::Format(
                    "seed tables use different lattices".into(),
                )));
            }
            let mut pair = SeedPair {
                seed_a: a.metadata.seed,
                seed_b: b.metadata.seed,
                max_abs: 0.0,
                max_rel: 0.0,
            };
            for n in 0..a.values.len() {
                let (va, vb) = (a.values[n], b.values[n]);
                let abs = (va - vb).abs();
                let rel = abs / va.abs().max(vb.abs()).max(f64::MIN_POSITIVE);
                if abs.is_finite() {
                    pair.max_abs = pair.max_abs.max(abs);
                    pair.max_rel = pair.max_rel.max(if abs == 0.0 { 0.0 } else { rel });
                }
                let (t, x, u) = a.lattice.node(n);
                let mut row = vec![pair.seed_a.to_string(), pair.seed_b.to_string(), num(t)];
                row.extend((0..d).map(|k| num(x[k])));
                row.extend((0..d).map(|k| num(u[k])));
                row.extend([num(va), num(vb), num(abs), num(rel), num(a.errors[n] + b.errors[n])]);
                rows.push(row);
            }
            pairs.push(pair);
        }
    }
    let mut cols: Vec<String> = ["seed_a", "seed_b", "t"].map(String::from).to_vec();
    cols.extend(io::axis_names("x", d));
    cols.extend(io::axis_names("u", d));
    cols.extend(["value_a", "value_b", "abs_diff", "rel_diff", "error_sum"].map(String::from));
    let text = io::write_document("seed-discrepancy", &(), &cols, &rows).map_err(LabError::stage("report"))?;
    Ok((text, pairs))
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsGap {
    pub eps: f64,
    /// `sup |V_ε − Ṽ|` over the compact report set.
    pub gap: f64,
    pub boundary_hits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPair {
    pub seed_a: u64,
    pub seed_b: u64,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub compact_set: Vec<[f64; 2]>,
    pub gaps: Vec<EpsGap>,
    pub gaps_decreasing: bool,
    /// `sup |V_HJB − Ṽ|` over the compact set.
    pub hjb_gap: Option<f64>,
    pub seed_pairs: Vec<SeedPair>,
    pub assumptions: AssumptionReport,
    /// Seconds per stage from the most recent run of each.
    pub wall_clock: BTreeMap<String, f64>,
}

// ---------------------------------------------------------------------------
// Orchestrator

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub layout: Layout,
    pub workers: usize,
    config_path: PathBuf,
    config_hash: String,
}

/// Resolved worker count: the flag, then the config, then the environment
/// variable, then one.
pub fn resolve_workers(flag: Option<usize>, cfg: &ExperimentConfig) -> usize {
    flag.or(cfg.workers)
        .or_else(|| std::env::var("HOMOGENIZE_LAB_WORKERS").ok()?.trim().parse().ok())
        .unwrap_or(1)
        .max(1)
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, config_path: &Path, config_bytes: &[u8], workers: usize) -> Self {
        Pipeline {
            layout: Layout::new(config.output_dir.clone()),
            config,
            workers,
            config_path: config_path.to_path_buf(),
            config_hash: io::sha256_hex(config_bytes),
        }
    }

    /// Runs `stages` in pipeline order, then rewrites the manifest.
    pub fn run(&self, stages: &[Stage]) -> Result<()> {
        std::fs::create_dir_all(&self.layout.root)
            .map_err(LabError::io(format!("creating {}", self.layout.root.display())))?;
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        let mut timings = self.read_timings();
        for stage in stages {
            let start = Instant::now();
            with_workers(self.workers, || self.run_stage(stage))?;
            timings.insert(stage.name().to_string(), start.elapsed().as_secs_f64());
            let text = serde_json::to_string_pretty(&timings).expect("timings serialise");
            write(&self.layout.timings(), &text)?;
        }
        self.write_manifest()
    }

    fn run_stage(&self, stage: Stage) -> Result<()> {
        let cfg = &self.config;
        let l = &self.layout;
        match stage {
            Stage::CheckAssumptions => {
                for &seed in &cfg.seeds {
                    write(&l.environment(seed), &environment_csv(cfg, seed)?)?;
                }
                let report = check_assumptions(cfg)?;
                write(&l.assumptions(), &to_json(&report))?;
            }
            Stage::Table => {
                for &seed in &cfg.seeds {
                    let t = table(cfg, seed)?;
                    write(&l.table(seed), &io::table_to_csv(&t).map_err(LabError::stage("table"))?)?;
                }
            }
            Stage::Solve => {
                let t = read_table(&l.table(cfg.seeds[0]))?;
                for &eps in &cfg.sweep.eps {
                    write(&l.fine(eps), &field_csv(&fine(cfg, eps)?, "solve")?)?;
                }
                write(&l.homogenized(), &field_csv(&homogenized(cfg, &t)?, "solve")?)?;
                if !cfg.sweep.tau.is_empty() {
                    write(&l.cell_gaps(), &cell_gaps(cfg)?)?;
                }
            }
            Stage::Hjb => {
                let t = read_table(&l.table(cfg.seeds[0]))?;
                let h = hamiltonian(cfg, &t)?;
                write(&l.hamiltonian(), &h.to_csv().map_err(LabError::stage("hjb"))?)?;
                write(&l.hjb(), &field_csv(&hjb(cfg, &h)?, "hjb")?)?;
            }
            Stage::Report => {
                let (report, seed_csv) = self.build_report()?;
                if let Some(text) = seed_csv {
                    write(&l.seed_discrepancy(), &text)?;
                }
                write(&l.convergence(), &to_json(&report))?;
                write(&l.report(), &render_report(cfg, &report, self.seed_tables()?.as_slice()))?;
            }
        }
        Ok(())
    }

    fn seed_tables(&self) -> Result<Vec<EffectiveLagrangianTable>> {
        self.config.seeds.iter().map(|&s| read_table(&self.layout.table(s))).collect()
    }

    /// Gathers the convergence report from stage artifacts on disk.
    pub fn build_report(&self) -> Result<(ConvergenceReport, Option<String>)> {
        let cfg = &self.config;
        let l = &self.layout;
        let compact = cfg.compact_set();
        let assumptions: AssumptionReport = read_json(&l.assumptions(), "check-assumptions")?;
        let hom = read_field(&l.homogenized(), "solve")?;
        let gap_err = LabError::stage("report");
        let mut gaps = Vec::new();
        for &eps in &cfg.sweep.eps {
            let f = read_field(&l.fine(eps), "solve")?;
            let gap = sup_gap(&f, &hom, &compact).map_err(LabError::stage("report"))?;
            gaps.push(EpsGap {
                eps,
                gap,
                boundary_hits: f.boundary_hits,
            });
        }
        let gaps_decreasing = gaps.windows(2).all(|w| w[1].gap < w[0].gap);
        let hjb_gap = if l.hjb().exists() {
            let v = read_field(&l.hjb(), "hjb")?;
            Some(sup_gap(&v, &hom, &compact).map_err(gap_err)?)
        } else {
            None
        };
        let tables = self.seed_tables()?;
        let (seed_csv, seed_pairs) = if tables.len() > 1 {
            let (text, pairs) = seed_discrepancy(&tables)?;
            (Some(text), pairs)
        } else {
            (None, Vec::new())
        };
        Ok((
            ConvergenceReport {
                compact_set: compact,
                gaps,
                gaps_decreasing,
                hjb_gap,
                seed_pairs,
                assumptions,
                wall_clock: self.read_timings(),
            },
            seed_csv,
        ))
    }

    fn read_timings(&self) -> BTreeMap<String, f64> {
        std::fs::read_to_string(self.layout.timings())
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    /// Lists every file in the output directory with its content hash.
    pub fn write_manifest(&self) -> Result<()> {
        let dir = &self.layout.root;
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(LabError::io(format!("listing {}", dir.display())))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.json")
            .collect();
        names.sort();
        let mut files = Vec::with_capacity(names.len());
        for name in names {
            let path = dir.join(&name);
            let bytes = std::fs::read(&path).map_err(LabError::io(format!("reading {}", path.display())))?;
            files.push(ManifestEntry {
                path: name,
                sha256: io::sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: self.config_path.display().to_string(),
            config_sha256: self.config_hash.clone(),
            model_hash: io::model_hash(&self.config.model, &self.config.environment)
                .map_err(LabError::stage("report"))?,
            seeds: self.config.seeds.clone(),
            files,
        };
        write(&self.layout.manifest(), &to_json(&manifest))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_path: String,
    pub config_sha256: String,
    pub model_hash: String,
    pub seeds: Vec<u64>,
    pub files: Vec<ManifestEntry>,
}

fn render_report(cfg: &ExperimentConfig, r: &ConvergenceReport, tables: &[EffectiveLagrangianTable]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Convergence report\n");
    let compact: Vec<String> = r.compact_set.iter().map(|[a, b]| format!("[{a}, {b}]")).collect();
    let _ = writeln!(s, "Compact set: {} over all time slices.\n", compact.join(" x "));
    let _ = writeln!(s, "## Fine versus homogenized\n");
    let _ = writeln!(s, "| eps | sup gap | boundary hits |");
    let _ = writeln!(s, "|---|---|---|");
    for g in &r.gaps {
        let _ = writeln!(s, "| {} | {:.6} | {} |", g.eps, g.gap, g.boundary_hits);
    }
    let _ = writeln!(s, "\nGaps decreasing in eps: {}", if r.gaps_decreasing { "yes" } else { "no" });
    if let Some(h) = r.hjb_gap {
        let _ = writeln!(s, "\nHJB on the effective Hamiltonian against the homogenized value: sup gap {h:.6}");
    }
    let _ = writeln!(s, "\n## Assumption checks\n");
    let _ = writeln!(s, "| # | check | passed | worst violation |");
    let _ = writeln!(s, "|---|---|---|---|");
    for c in &r.assumptions.checks {
        let _ = writeln!(s, "| {} | {} | {} | {:.3e} |", c.index, c.name, c.passed, c.worst_violation);
    }
    if !r.seed_pairs.is_empty() {
        let _ = writeln!(s, "\n## Seed discrepancy\n");
        for p in &r.seed_pairs {
            let _ = writeln!(
                s,
                "Seeds {} and {}: max |diff| {:.3e}, max relative {:.3e}",
                p.seed_a, p.seed_b, p.max_abs, p.max_rel
            );
        }
        let _ = writeln!(s);
        for line in seed_lines(cfg, tables) {
            let _ = writeln!(s, "- {line}");
        }
    }
    if !r.wall_clock.is_empty() {
        let _ = writeln!(s, "\n## Wall clock\n");
        let _ = writeln!(s, "| stage | seconds |");
        let _ = writeln!(s, "|---|---|");
        for (k, v) in &r.wall_clock {
            let _ = writeln!(s, "| {k} | {v:.2} |");
        }
    }
    s
}

/// One line per table node and seed pair.
pub fn seed_lines(cfg: &ExperimentConfig, tables: &[EffectiveLagrangianTable]) -> Vec<String> {
    let d = cfg.model.dimension;
    let fmt = |v: homogenize_core::Vector| {
        let parts: Vec<String> = (0..d).map(|k| format!("{}", v[k])).collect();
        format!("({})", parts.join(", "))
    };
    let mut out = Vec::new();
    for (i, a) in tables.iter().enumerate() {
        for b in &tables[i + 1..] {
            for n in 0..a.values.len().min(b.values.len()) {
                let (t, x, u) = a.lattice.node(n);
                let (va, vb) = (a.values[n], b.values[n]);
                out.push(format!(
                    "seeds {}/{} t={} x={} u={}: {:.6} vs {:.6}, |diff| {:.3e}",
                    a.metadata.seed,
                    b.metadata.seed,
                    t,
                    fmt(x),
                    fmt(u),
                    va,
                    vb,
                    (va - vb).abs()
                ));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Artifact IO

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serialises");
    s.push('\n');
    s
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(LabError::io(format!("creating {}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(LabError::io(format!("writing {}", path.display())))
}

/// Reads an upstream artifact; a missing file maps to exit status 4.
pub fn read_artifact(path: &Path, stage: &'static str) -> Result<String> {
    if !path.is_file() {
        return Err(LabError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    std::fs::read_to_string(path).map_err(LabError::io(format!("reading {}", path.display())))
}

pub fn read_table(path: &Path) -> Result<EffectiveLagrangianTable> {
    io::table_from_csv(&read_artifact(path, "table")?).map_err(LabError::stage("table"))
}

pub fn read_field(path: &Path, stage: &'static str) -> Result<ValueField> {
    ValueField::from_csv(&read_artifact(path, stage)?).map_err(LabError::stage(stage))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T> {
    let text = read_artifact(path, stage)?;
    serde_json::from_str(&text).map_err(|e| LabError::stage(stage)(e.into()))
}

pub fn field_csv(v: &ValueField, stage: &'static str) -> Result<String> {
    v.to_csv().map_err(LabError::stage(stage))
}
