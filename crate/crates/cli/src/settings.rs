//! Config resolution: command-line flag, then `MUMU_SEED` (seed only), then
//! the `key=value` config file, then built-in defaults.

use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use muse_core::config::KvConfig;

pub const SEED_ENV: &str = "MUMU_SEED";

pub fn load(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::read(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(KvConfig::default()),
    }
}

pub fn resolve_seed(flag: Option<u64>, file: &KvConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer"));
    }
    Ok(file.get("seed")?.unwrap_or(0))
}

/// Flag, else config file, else `default`.
pub fn pick<T: FromStr>(flag: Option<T>, file: &KvConfig, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}
