#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// A pipeline configuration small enough to run in seconds.
pub const TINY_CONFIG: &str = r#"
seed = 3
corpus_patches = 6
pixel_budget = 4000
dataset_patches = 16
grid_documents = 1
eval_documents = 1
document_height = 256
document_width = 300

[generator]
handwriting_probability = 0.5

[kmeans]
restarts = 2

[train]
iterations = 100
log_every = 20

[grid]
overlap_factors = [0.0]
min_confidences = [0.3, 0.7]
min_contour_areas = [15]
"#;

pub fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

/// Runs the binary with `args` against `run_dir`.
pub fn docsynth(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docsynth"))
        .env("DOCSYNTH_RUN_DIR", run_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The machine-readable error line printed on standard error.
pub fn error_line(o: &Output) -> serde_json::Value {
    let text = stderr(o);
    let line = text.lines().rev().find(|l| l.starts_with("{\"error\"")).expect("error line present");
    serde_json::from_str(line).unwrap()
}

pub fn assert_success(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
