//! `homogenize-lab`: run homogenization experiments from a config file.
//!
//! Exit status: 0 on success, 2 for invalid configs, 3 when a numerical
//! stage fails, 4 when an upstream artifact is missing.

// `!(a >= b)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homogenize_core::cell::{f_ab, CellOptions, CellProblemSpec};
use homogenize_core::io;
use homogenize_core::parallel::with_workers;
use homogenize_core::Vector;
use homogenize_lab::pipeline::{self, resolve_workers, write, Layout, Pipeline, Stage};
use homogenize_lab::{ExperimentConfig, LabError, Result};

#[derive(Parser)]
#[command(name = "homogenize-lab", version, about = "Homogenization experiments for optimal control in random media")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON with a `.json` extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; falls back to the config, then HOMOGENIZE_LAB_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Output directory for `run` and `report`, output file otherwise.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline, or only the given stages.
    Run {
        #[arg(long, value_enum)]
        stage: Vec<Stage>,
    },
    /// Sample the environment field to CSV.
    GenEnv {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve one cell problem F_{0,b} and print the result as JSON.
    Cell {
        #[arg(long)]
        b: f64,
        /// Average velocity, comma-separated in two dimensions.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        u: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the effective-Lagrangian table.
    Table {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve the fine problem at one ε, or the homogenized problem.
    Solve {
        #[arg(long, conflicts_with = "homogenized", required_unless_present = "homogenized")]
        eps: Option<f64>,
        #[arg(long)]
        homogenized: bool,
        /// Effective-Lagrangian table; defaults to the first seed's table in the output directory.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Tabulate the effective Hamiltonian and solve the HJB equation.
    Hjb {
        #[arg(long)]
        table: Option<PathBuf>,
        /// Where to write the Hamiltonian table.
        #[arg(long)]
        hamiltonian: Option<PathBuf>,
    },
    /// Summarise the artifacts of a run.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf, Vec<u8>)> {
    let path = common.config.clone().ok_or_else(|| LabError::Config {
        path: PathBuf::from("<none>"),
        message: "--config is required".into(),
    })?;
    let mut cfg = ExperimentConfig::load(&path)?;
    let bytes = std::fs::read(&path).map_err(LabError::io(format!("reading {}", path.display())))?;
    if let Some(seeds) = &common.seed_override {
        if seeds.is_empty() {
            return Err(LabError::Config {
                path,
                message: "invalid `--seed-override`: needs at least one seed".into(),
            });
        }
        cfg.seeds = seeds.clone();
    }
    Ok((cfg, path, bytes))
}

fn vector(values: &[f64], dim: usize, flag: &str) -> Result<Vector> {
    match Vector::from_slice(values) {
        Some(v) if values.len() == dim => Ok(v),
        _ => Err(LabError::Config {
            path: PathBuf::from(flag),
            message: format!("expected {dim} comma-separated numbers"),
        }),
    }
}

fn emit(output: Option<&Path>, default: PathBuf, text: &str) -> Result<()> {
    let path = output.map(Path::to_path_buf).unwrap_or(default);
    write(&path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let (mut cfg, path, bytes) = load(&cli.common)?;
    let output = cli.common.output.as_deref();
    if let (Command::Run { .. } | Command::Report, Some(dir)) = (&cli.command, output) {
        cfg.output_dir = dir.to_path_buf();
    }
    let workers = resolve_workers(cli.common.workers, &cfg);
    let layout = Layout::new(cfg.output_dir.clone());
    let seed = |s: Option<u64>| s.unwrap_or(cfg.seeds[0]);

    match cli.command {
        Command::Run { stage } => {
            let stages = if stage.is_empty() { Stage::ALL.to_vec() } else { stage };
            let p = Pipeline::new(cfg, &path, &bytes, workers);
            p.run(&stages)?;
            if stages.contains(&Stage::Report) {
                print_summary(&p)?;
            }
        }
        Command::GenEnv { seed: s } => {
            let s = seed(s);
            emit(output, layout.environment(s), &pipeline::environment_csv(&cfg, s)?)?;
        }
        Command::Cell { b, u, t, x, seed: s } => {
            let dim = cfg.model.dimension;
            let u = vector(&u, dim, "--u")?;
            let x = match x {
                Some(x) => vector(&x, dim, "--x")?,
                None => Vector::ZERO,
            };
            let env = pipeline::environment(&cfg, seed(s))?;
            let spec = CellProblemSpec::new(t, x, u, &cfg.grids.table.micro, b);
            let r = with_workers(workers, || f_ab(&cfg.model, &env, 0.0, b, &spec, CellOptions::default()))
                .map_err(LabError::stage("cell"))?;
            println!("{}", serde_json::to_string(&r).expect("cell result serialises"));
        }
        Command::Table { seed: s } => {
            let s = seed(s);
            let t = with_workers(workers, || pipeline::table(&cfg, s))?;
            emit(output, layout.table(s), &io::table_to_csv(&t).map_err(LabError::stage("table"))?)?;
        }
        Command::Solve { eps, homogenized, table } => {
            let (field, default) = if homogenized {
                let t = pipeline::read_table(&table.unwrap_or_else(|| layout.table(cfg.seeds[0])))?;
                (with_workers(workers, || pipeline::homogenized(&cfg, &t))?, layout.homogenized())
            } else {
                let eps = eps.expect("clap requires --eps without --homogenized");
                if !(eps > 0.0) {
                    return Err(LabError::Config {
                        path: PathBuf::from("--eps"),
                        message: "ε must be positive".into(),
                    });
                }
                (with_workers(workers, || pipeline::fine(&cfg, eps))?, layout.fine(eps))
            };
            emit(output, default, &pipeline::field_csv(&field, "solve")?)?;
        }
        Command::Hjb { table, hamiltonian } => {
            let t = pipeline::read_table(&table.unwrap_or_else(|| layout.table(cfg.seeds[0])))?;
            let (h, v) = with_workers(workers, || -> Result<_> {
                let h = pipeline::hamiltonian(&cfg, &t)?;
                let v = pipeline::hjb(&cfg, &h)?;
                Ok((h, v))
            })?;
            let h_path = hamiltonian.unwrap_or_else(|| layout.hamiltonian());
            emit(Some(&h_path), h_path.clone(), &h.to_csv().map_err(LabError::stage("hjb"))?)?;
            emit(output, layout.hjb(), &pipeline::field_csv(&v, "hjb")?)?;
        }
        Command::Report => {
            let p = Pipeline::new(cfg, &path, &bytes, workers);
            p.run(&[Stage::Report])?;
            print_summary(&p)?;
        }
    }
    Ok(())
}

fn print_summary(p: &Pipeline) -> Result<()> {
    let (report, _) = p.build_report()?;
    for g in &report.gaps {
        println!("eps {}: sup gap {:.6}", g.eps, g.gap);
    }
    if let Some(h) = report.hjb_gap {
        println!("hjb: sup gap {h:.6}");
    }
    let tables: Vec<_> = p
        .config
        .seeds
        .iter()
        .map(|&s| pipeline::read_table(&p.layout.table(s)))
        .collect::<Result<_>>()?;
    for line in pipeline::seed_lines(&p.config, &tables) {
        println!("{line}");
    }
    println!("report: {}", p.layout.report().display());
    Ok(())
}
