//! Paths to the bundled fixtures and mock-config builders.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// The bundled mock config with absolute input paths, writing into
/// `out_dir`, passed through `edit`.
pub fn mock_config_text(out_dir: &Path, edit: impl Fn(String) -> String) -> String {
    let base = std::fs::read_to_string(fixture("mock.toml")).unwrap();
    let base = base
        .replace(
            "scenario_path = \"scenarios10.jsonl\"",
            &format!("scenario_path = {:?}", fixture("scenarios10.jsonl")),
        )
        .replace(
            "output_dir = \"../../../target/mock-run\"",
            &format!("output_dir = {:?}", out_dir),
        )
        .replace(
            "lexicon_path = \"lexicon.txt\"",
            &format!("lexicon_path = {:?}", fixture("lexicon.txt")),
        );
    edit(base)
}

/// Writes a config file into `dir` and returns its path; outputs go to
/// `dir/out`.
pub fn write_mock_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, mock_config_text(&dir.join("out"), edit)).unwrap();
    path
}

/// Every file under `dir` (recursively, relative path → bytes), except the
/// lock file.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != ".lock" {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
