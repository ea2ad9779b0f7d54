mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{config_text, snapshot, write_config, TIMED};
use homogenize_lab::pipeline::Manifest;
use homogenize_lab::ExperimentConfig;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homogenize-lab"))
        .args(args)
        .env_remove("HOMOGENIZE_LAB_WORKERS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Trivial config with a coarser control table, for fast end-to-end runs.
fn small_trivial(dir: &Path, out: &Path) -> std::path::PathBuf {
    let text = config_text("trivial.toml").replace(
        "u = [{ min = -2.0, max = 2.0, n = 33 }]",
        "u = [{ min = -2.0, max = 2.0, n = 17 }]",
    );
    let text = text.replace("control_grid_n = 33", "control_grid_n = 17");
    write_config(dir, "small.toml", &text, out)
}

#[test]
fn shipped_configs_parse_and_validate() {
    for name in ["trivial.toml", "periodic1d.toml", "shotnoise1d.toml"] {
        let path = common::config_path(name);
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn json_config_is_equivalent_to_toml() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text("periodic1d.toml");
    let value: toml::Value = toml::from_str(&text).unwrap();
    let json = serde_json::to_string_pretty(&value).unwrap();
    let path = dir.path().join("periodic1d.json");
    std::fs::write(&path, json).unwrap();
    let from_json = ExperimentConfig::load(&path).unwrap();
    let from_toml = ExperimentConfig::load(&common::config_path("periodic1d.toml")).unwrap();
    assert_eq!(from_json, from_toml);
}

#[test]
fn negative_eps_exits_2_naming_the_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text("trivial.toml").replace("eps = [0.25, 0.125, 0.0625]", "eps = [0.25, -0.125]");
    let cfg = write_config(dir.path(), "bad.toml", &text, &dir.path().join("out"));
    let o = lab(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("sweep.eps"), "{err}");
    let line = text.lines().position(|l| l.starts_with("eps =")).unwrap() + 1;
    assert!(err.contains(&format!("line {line}")), "{err}");
}

#[test]
fn unknown_field_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text("trivial.toml").replace("[sweep]", "[sweep]\nepsilon = [0.1]");
    let cfg = write_config(dir.path(), "bad.toml", &text, &dir.path().join("out"));
    let o = lab(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("epsilon") && err.contains("line"), "{err}");
}

#[test]
fn missing_config_exits_2() {
    let o = lab(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_upstream_artifact_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = small_trivial(dir.path(), &out);
    let o = lab(&["solve", "--homogenized", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("table"));
    let o = lab(&["run", "--stage", "report", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_3_with_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = small_trivial(dir.path(), &out);
    let o = lab(&["table", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    // With dissipation fixed by |p| ≤ 1 this step is far above the stable one.
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("dt = 0.00390625", "dt = 0.5\np_max = 1.0");
    std::fs::write(&cfg, text).unwrap();
    let o = lab(&["hjb", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("`hjb`"), "{}", stderr(&o));
}

#[test]
fn cell_prints_one_result_as_json() {
    let o = lab(&[
        "cell",
        "--config",
        common::config_path("periodic1d.toml").to_str().unwrap(),
        "--b",
        "50",
        "--u",
        "1.0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let value = v["value"].as_f64().unwrap();
    // Zero potential along the way bounds the cost below by b·ℓ(1).
    assert!(value >= 50.0 * 0.5 - 1e-9, "{value}");
    assert_eq!(v["duration"].as_f64(), Some(50.0));
    assert!(v["argmin_path"].as_array().is_some_and(|p| !p.is_empty()));
}

#[test]
fn stagewise_table_and_solve_reproduce_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_trivial(dir.path(), &out);
    let cfg_s = cfg.to_str().unwrap();
    assert!(lab(&["run", "--config", cfg_s]).status.success());

    let table = dir.path().join("table.csv");
    let v = dir.path().join("v.csv");
    let o = lab(&["table", "--config", cfg_s, "--output", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lab(&[
        "solve",
        "--homogenized",
        "--config",
        cfg_s,
        "--table",
        table.to_str().unwrap(),
        "--output",
        v.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&table).unwrap(), std::fs::read(out.join("table_seed1.csv")).unwrap());
    assert_eq!(std::fs::read(&v).unwrap(), std::fs::read(out.join("homogenized.csv")).unwrap());

    // Rerunning one stage in place leaves every deterministic file unchanged.
    let before = snapshot(&out, &TIMED);
    assert!(lab(&["run", "--stage", "solve", "--config", cfg_s]).status.success());
    assert_eq!(before, snapshot(&out, &TIMED));
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_trivial(dir.path(), &out);
    let o = lab(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = snapshot(&out, &["manifest.json"]);
    assert_eq!(m.files.len(), files.len());
    for (entry, (name, bytes)) in m.files.iter().zip(&files) {
        assert_eq!(&entry.path, name);
        assert_eq!(entry.sha256, homogenize_core::io::sha256_hex(bytes));
    }
    let config_bytes = std::fs::read(&cfg).unwrap();
    assert_eq!(m.config_sha256, homogenize_core::io::sha256_hex(&config_bytes));
}

#[test]
fn report_over_two_seeds_prints_a_line_per_table_node() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_trivial(dir.path(), &out);
    let o = lab(&["run", "--seed-override", "3,4", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let nodes = ExperimentConfig::load(&cfg).unwrap().table_lattice().grid().len();
    let lines = stdout.lines().filter(|l| l.starts_with("seeds 3/4 ")).count();
    assert_eq!(lines, nodes);
    assert!(out.join("table_seed3.csv").is_file() && out.join("table_seed4.csv").is_file());
    assert!(out.join("seed_discrepancy.csv").is_file());
}

#[test]
fn output_flag_redirects_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_trivial(dir.path(), &dir.path().join("unused"));
    let other = dir.path().join("elsewhere");
    let o = lab(&[
        "run",
        "--stage",
        "check-assumptions",
        "--output",
        other.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(other.join("assumptions.json").is_file());
    assert!(!dir.path().join("unused").exists());
}
