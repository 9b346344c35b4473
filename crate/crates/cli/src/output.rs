use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn hex(hash: u64) -> String {
    format!("{hash:016x}")
}

/// Parses a TOML file, rejecting unknown keys through the target's serde attributes.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// `<out>/<hash>`, created if missing.
pub fn run_dir(out: &Path, hash: u64) -> Result<PathBuf> {
    let dir = out.join(hex(hash));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Stamp carried by every output.
#[derive(Serialize)]
pub struct Stamp {
    pub version: &'static str,
    pub config_hash: String,
}

impl Stamp {
    pub fn new(hash: u64) -> Self {
        Self { version: VERSION, config_hash: hex(hash) }
    }
}
