//! Output directory handling: atomic writes and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::failure::{Context, Failure};
use crate::Command;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: Command,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Collects inputs read and outputs written by one command.
pub struct Run {
    pub out: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl Run {
    pub fn new(out: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(out).at(out)?;
        Ok(Run {
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        if self.inputs.iter().any(|d| d.path == path) {
            return Ok(());
        }
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Writes `name` inside the output directory through a temporary file and a rename.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        write_atomic(&path, bytes)?;
        self.outputs.retain(|d| d.path != path);
        self.outputs.push(FileDigest {
            path: path.clone(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        let mut text = serde_json::to_vec_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
        text.push(b'\n');
        self.write(name, &text)
    }

    pub fn finish(mut self, command: &Command, config: &RunConfig) -> Result<Manifest, Failure> {
        let toml = toml::to_string(config).map_err(|e| Failure::config(format!("serializing configuration: {e}")))?;
        self.write("config.toml", toml.as_bytes())?;
        let manifest = Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.clone(),
            config: config.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| Failure::data(e.to_string()))?;
        text.push(b'\n');
        write_atomic(&self.out.join(MANIFEST_FILE), &text)?;
        Ok(manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).at(dir)?;
    tmp.write_all(bytes).at(path)?;
    tmp.as_file().sync_all().at(path)?;
    tmp.persist(path).map_err(|e| Failure::from(e.error).at(path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    let text = std::fs::read_to_string(path).at(path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if m.manifest_version != MANIFEST_VERSION {
        return Err(Failure::config(format!(
            "{}: manifest version {} (this build reads {MANIFEST_VERSION})",
            path.display(),
            m.manifest_version
        )));
    }
    Ok(m)
}

/// Fails if any recorded input no longer has its recorded digest.
pub fn verify_inputs(m: &Manifest) -> Result<(), Failure> {
    for d in &m.inputs {
        let now = sha256_file(&d.path)?;
        if now != d.sha256 {
            return Err(Failure::data(format!(
                "{}: content changed since the recorded run (sha256 {now}, recorded {})",
                d.path.display(),
                d.sha256
            )));
        }
    }
    Ok(())
}
