use std::fs;
use std::path::{Path, PathBuf};

use crate::fail::{CliResult, Failure};

pub const CACHE_ENV: &str = "MTSUNET_CACHE";

/// `--out` if given, else `$MTSUNET_CACHE/<default_name>`.
pub fn resolve_out(out: Option<PathBuf>, default_name: &str) -> CliResult<PathBuf> {
    if let Some(p) = out {
        return Ok(p);
    }
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir).join(default_name)),
        _ => Err(Failure::usage(format!("--out is required when {CACHE_ENV} is not set"))),
    }
}

/// Create `dir`, refusing to reuse a nonempty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::usage(format!("{} exists and is not a directory", dir.display())));
        }
        let nonempty = fs::read_dir(dir)
            .map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Failure::usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    fs::write(path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}
