//! Output directory bookkeeping: every file a command writes is hashed and
//! listed in the directory's `manifest.json` together with the resolved
//! settings and per-stage wall-clock timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a BTreeMap<String, Value>,
    inputs: &'a BTreeMap<String, String>,
    outputs: Vec<OutputEntry>,
    timings_seconds: &'a BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// An output directory being filled by one command.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    outputs: Vec<PathBuf>,
    inputs: BTreeMap<String, String>,
    timings: BTreeMap<String, f64>,
}

impl RunDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            outputs: Vec::new(),
            inputs: BTreeMap::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    /// Writes `contents` to `rel` (creating parent directories) and lists it.
    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    /// Lists a file that something else already wrote under the root.
    pub fn adopt(&mut self, path: PathBuf) {
        self.outputs.push(self.root.join(path));
    }

    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let out = f(self);
        *self.timings.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn finish(self, command: &str, seed: u64, settings: &Settings) -> CliResult<PathBuf> {
        for key in settings.unused() {
            eprintln!("warning: config key {key:?} is not used by {command}");
        }
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for path in &self.outputs {
            let (sha256, bytes) = sha256_file(path)?;
            let rel = path.strip_prefix(&self.root).unwrap_or(path);
            outputs.push(OutputEntry {
                path: rel.display().to_string(),
                sha256,
                bytes,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        outputs.dedup_by(|a, b| a.path == b.path);
        let manifest = Manifest {
            tool: "pointshield",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config: settings.resolved(),
            inputs: &self.inputs,
            outputs,
            timings_seconds: &self.timings,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
