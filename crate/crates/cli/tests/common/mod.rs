#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fuselab"))
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fuselab")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "fuselab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Small 32-pixel dataset and a one-epoch schedule; seconds per command.
pub fn tiny_config(dir: &Path, lesions: usize) -> PathBuf {
    let cfg = format!(
        r#"{{
  "seed": 7,
  "data": {{ "n_lesions": {lesions}, "malignant_fraction": 0.5, "patch_size": 32, "views_per_modality": 2 }},
  "train": {{ "epochs": 1, "fusion_epochs": 1, "batch_size": 8 }},
  "eval": {{ "holdout": 0 }}
}}
"#
    );
    let path = dir.join("tiny.json");
    fs::write(&path, cfg).unwrap();
    path
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
