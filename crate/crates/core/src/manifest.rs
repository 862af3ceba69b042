//! Run manifests written next to every artifact a command produces.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let sha256 = if path.is_dir() {
            dir_sha256(path)?
        } else {
            checkpoint::file_sha256(path)?
        };
        Ok(Self {
            path: path.display().to_string(),
            sha256,
        })
    }
}

/// Hash over relative paths and contents of every file below `dir`.
pub fn dir_sha256(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut parts = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().into_owned();
        parts.push(rel);
        parts.push(checkpoint::file_sha256(f)?);
    }
    Ok(checkpoint::fingerprint_parts(parts.iter().map(String::as_str)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub tool_version: String,
    pub started_unix: f64,
    pub wall_clock_secs: f64,
}

/// Collects a manifest while a command runs.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<FileRecord>,
    started_unix: f64,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn new<C: Serialize>(command: &str, config: &C, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds,
            inputs: vec![],
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            clock: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(self)
    }

    /// Fingerprints `outputs` and writes the manifest to `path`.
    pub fn finish(self, outputs: &[PathBuf], path: &Path) -> Result<RunManifest> {
        let outputs = outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs,
            tool_version: TOOL_VERSION.to_string(),
            started_unix: self.started_unix,
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        };
        m.save(path)?;
        Ok(m)
    }
}

impl RunManifest {
    /// File name used for a command's manifest inside its output directory.
    pub fn file_name(command: &str) -> String {
        format!("{command}.run.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every recorded output still exists with the recorded hash.
    pub fn verify_outputs(&self) -> Result<()> {
        for o in &self.outputs {
            let now = FileRecord::of(Path::new(&o.path))?;
            if now.sha256 != o.sha256 {
                return Err(Error::Invariant(format!("{} changed since the run", o.path)));
            }
        }
        Ok(())
    }
}

/// Checks a sequence of manifests: every input that an earlier manifest
/// produced must carry that output's hash, and all outputs must be intact.
pub fn verify_chain(chain: &[RunManifest]) -> Result<()> {
    for (i, m) in chain.iter().enumerate() {
        m.verify_outputs()?;
        for input in &m.inputs {
            let producer = chain[..i]
                .iter()
                .rev()
                .flat_map(|p| p.outputs.iter())
                .find(|o| same_path(&o.path, &input.path));
            if let Some(o) = producer {
                if o.sha256 != input.sha256 {
                    return Err(Error::Invariant(format!(
                        "{} consumed {} with a different hash than produced",
                        m.command, input.path
                    )));
                }
            }
        }
    }
    Ok(())
}

fn same_path(a: &str, b: &str) -> bool {
    let ca = Path::new(a).canonicalize();
    let cb = Path::new(b).canonicalize();
    match (ca, cb) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}
