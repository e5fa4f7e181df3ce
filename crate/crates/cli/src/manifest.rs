use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sugmine::hashing::{json_hash, sha256_hex};
use sugmine::Error;

use crate::CliError;

/// Record of one subcommand invocation, written next to its output.
#[derive(Debug, Serialize)]
pub struct CommandManifest {
    pub command: String,
    pub tool_version: String,
    /// Fully resolved settings, including every default.
    pub settings: Value,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_hex(&bytes))
}

/// `<out>.manifest.json`, or `<dir>/manifest.json` for directory outputs.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("manifest.json");
    }
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

impl CommandManifest {
    pub fn new(command: &str, settings: &impl Serialize, seeds: BTreeMap<String, u64>) -> Self {
        let settings = serde_json::to_value(settings).expect("settings serialize");
        CommandManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: json_hash(&settings),
            settings,
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    /// Hashes the outputs and writes the manifest to `path`.
    pub fn finish(mut self, path: &Path, outputs: &[&Path]) -> Result<(), CliError> {
        for p in outputs {
            if p.is_file() {
                self.outputs.insert(p.display().to_string(), file_hash(p)?);
            }
        }
        let mut json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Refuses invocations that would overwrite one of their own inputs.
pub fn ensure_distinct(inputs: &[&Path], outputs: &[&Path]) -> Result<(), CliError> {
    for o in outputs {
        for i in inputs {
            if same_file(i, o) {
                return Err(CliError::Usage(format!(
                    "output {} would overwrite input {}",
                    o.display(),
                    i.display()
                )));
            }
        }
    }
    Ok(())
}
