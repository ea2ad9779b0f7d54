#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn config_text(name: &str) -> String {
    std::fs::read_to_string(config_path(name)).expect("shipped config exists")
}

/// Writes `text` with its `output_dir` pointed at `out` and returns the path.
pub fn write_config(dir: &Path, file: &str, text: &str, out: &Path) -> PathBuf {
    let text: String = text
        .lines()
        .map(|l| {
            if l.starts_with("output_dir") {
                format!("output_dir = {:?}", out.display().to_string())
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.join(file);
    std::fs::write(&path, text + "\n").unwrap();
    path
}

/// Contents of every file in `dir` except those named in `skip`.
pub fn snapshot(dir: &Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !skip.contains(&n.as_str()))
        .map(|n| {
            let bytes = std::fs::read(dir.join(&n)).unwrap();
            (n, bytes)
        })
        .collect();
    out.sort();
    out
}

/// Files whose content depends on wall-clock time.
pub const TIMED: [&str; 4] = ["timings.json", "report.md", "convergence.json", "manifest.json"];
