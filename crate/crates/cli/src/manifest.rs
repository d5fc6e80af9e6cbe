use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Record of one finished command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the `config.json` written next to the manifest.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Tracks a run from start to its manifest.
pub struct Run {
    command: &'static str,
    out: PathBuf,
    started: Instant,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    /// Creates the output directory and stores the effective config.
    pub fn start<C: Serialize>(command: &'static str, out: &Path, config: &C, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut bytes = serde_json::to_vec_pretty(config)?;
        bytes.push(b'\n');
        let config_path = out.join(CONFIG_FILE);
        std::fs::write(&config_path, &bytes).with_context(|| format!("writing {}", config_path.display()))?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            started: Instant::now(),
            config_hash: sha256_hex(&bytes),
            seed,
            inputs: Vec::new(),
            outputs: vec![config_path],
        })
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Writes the manifest through a temporary file and a rename, so a
    /// crashed run never leaves a partial manifest behind.
    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        write_atomic(&self.out.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}
