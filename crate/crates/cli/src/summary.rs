//! Per-subcommand run summaries: config hash, git description and the
//! headline metrics, as deterministic JSON.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

pub fn git_describe() -> Option<String> {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?;
    let s = s.trim();
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

pub fn write_summary(
    dir: &Path,
    subcommand: &str,
    cfg: &ExperimentConfig,
    metrics: BTreeMap<String, Value>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let body = json!({
        "subcommand": subcommand,
        "config_hash": cfg.hash(),
        "git_describe": git_describe(),
        "metrics": metrics,
        "config": cfg.entries(),
    });
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
