//! Config layering and the `run.json` record every command leaves behind.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use place_core::config::{RawConfig, RunConfig};
use serde_json::{json, Value};

use crate::{Common, UsageError};

pub const RUN_RECORD: &str = "run.json";
pub const SEED_ENV: &str = "PLACE_SEED";

/// Reads a config file; a previous `run.json` contributes its `config` key.
fn read_config_file(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    if value.get("command").is_some() {
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
    }
    serde_json::from_value(value).map_err(|e| UsageError(format!("malformed config {}: {e}", path.display())).into())
}

/// File config overlaid with flags; the seed falls back to `$PLACE_SEED`.
pub fn layered(common: &Common, flags: RawConfig) -> Result<RawConfig> {
    let file = match &common.config {
        Some(p) => read_config_file(p)?,
        None => RawConfig::default(),
    };
    let flags = RawConfig { out: common.out.clone(), seed: common.seed, ..flags };
    let mut raw = file.overlay(flags);
    if raw.seed.is_none() {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed = s.trim().parse().map_err(|_| UsageError(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            raw.seed = Some(seed);
        }
    }
    Ok(raw)
}

pub fn resolve(raw: RawConfig) -> Result<RunConfig> {
    raw.resolve().map_err(|e| UsageError(e.to_string()).into())
}

pub fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| UsageError(format!("missing {what}")).into())
}

/// Creates the output directory.
pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = require(&cfg.out, "--out")?.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_run_json(dir: &Path, command: &str, argv: &[String], cfg: &RunConfig, extra: Value) -> Result<()> {
    let record = json!({
        "command": command,
        "args": argv,
        "git": git_describe(),
        "config": RawConfig::from(cfg),
        "extra": extra,
    });
    let path = dir.join(RUN_RECORD);
    std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").with_context(|| format!("writing {}", path.display()))
}
