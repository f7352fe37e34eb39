//! `manifest.json`: what a run read, which seeds it used and what it wrote.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("RAFT_BUILD_VERSION");

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// Seconds since the Unix epoch; the only field that differs between reruns.
    pub created_unix: u64,
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputFile>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seeds: &[u64], config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            root_seed: seeds.first().copied().unwrap_or(0),
            seeds: seeds.to_vec(),
            inputs: Vec::new(),
            config,
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputFile { path: path.to_path_buf(), sha256: file_sha256(path)? });
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
