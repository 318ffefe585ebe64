use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use panelnet::Result;

/// Provenance record dropped next to every file-producing run.
///
/// Wall-clock state lives only here, so every other output byte is a pure
/// function of (inputs, flags, seed).
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

/// Accumulates the pieces of a manifest while a command runs and writes
/// `manifest.json` last, after every other output has landed.
pub struct Run {
    command: String,
    config_digest: Option<String>,
    seed: Option<u64>,
    started_at: String,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &str) -> Self {
        Run {
            command: command.into(),
            config_digest: None,
            seed: None,
            started_at: timestamp(),
            outputs: Vec::new(),
        }
    }

    pub fn set_config(&mut self, raw: &[u8]) {
        self.config_digest = Some(sha256_hex(raw));
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn record(&mut self, name: &str) {
        self.outputs.push(name.into());
    }

    /// Serializes `value` as pretty JSON into `dir/name` and records it.
    pub fn write_json<T: Serialize>(&mut self, dir: &Path, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(dir.join(name), text)?;
        self.record(name);
        Ok(())
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config_digest: self.config_digest,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: self.started_at,
            finished_at: timestamp(),
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Creates `dir` if needed and refuses paths that exist as plain files.
pub fn prepare_out_dir(dir: &PathBuf) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}
