//! Staged artifact writer and run manifest.
//!
//! Artifacts are written into a private staging directory and moved into the
//! output directory only when the whole run succeeds; `manifest.json` is
//! moved last.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub preset: Option<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Single writer for all files of one run.
pub struct Output {
    dir: PathBuf,
    staging: PathBuf,
    created: bool,
    committed: bool,
    artifacts: Vec<Artifact>,
}

impl Output {
    pub fn new(dir: &Path) -> Self {
        let staging = dir.join(format!(".staging-{}", std::process::id()));
        Self { dir: dir.to_path_buf(), staging, created: false, committed: false, artifacts: Vec::new() }
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        if self.artifacts.iter().any(|a| a.name == name) || name == MANIFEST {
            return Err(CliError::Io(format!("artifact `{name}` written twice")));
        }
        if !self.created {
            fs::create_dir_all(&self.staging).map_err(|e| io_err(&self.staging, e))?;
            self.created = true;
        }
        let path = self.staging.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.artifacts.push(Artifact {
            name: name.to_string(),
            sha256: sha256_hex(contents),
            bytes: contents.len() as u64,
        });
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Moves every artifact into place, then writes the manifest.
    pub fn commit(mut self, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        if !self.created {
            fs::create_dir_all(&self.staging).map_err(|e| io_err(&self.staging, e))?;
            self.created = true;
        }
        manifest.artifacts = self.artifacts.clone();
        manifest.finished_unix_s = unix_now();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let staged_manifest = self.staging.join(MANIFEST);
        fs::write(&staged_manifest, text).map_err(|e| io_err(&staged_manifest, e))?;
        for a in &self.artifacts {
            let from = self.staging.join(&a.name);
            let to = self.dir.join(&a.name);
            fs::rename(&from, &to).map_err(|e| io_err(&to, e))?;
        }
        let to = self.dir.join(MANIFEST);
        fs::rename(&staged_manifest, &to).map_err(|e| io_err(&to, e))?;
        self.committed = true;
        let _ = fs::remove_dir(&self.staging);
        Ok(to)
    }
}

impl Drop for Output {
    fn drop(&mut self) {
        if self.created && !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Recomputes every artifact digest listed in `dir/manifest.json`, printing
/// one status line per artifact.
pub fn verify(dir: &Path) -> Result<(), CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("{}: malformed manifest: {e}", path.display())))?;
    let mut report = Vec::new();
    let mut bad = Vec::new();
    for a in &manifest.artifacts {
        let p = dir.join(&a.name);
        match fs::read(&p) {
            Ok(bytes) if sha256_hex(&bytes) == a.sha256 && bytes.len() as u64 == a.bytes => {
                report.push(format!("OK       {}", a.name));
            }
            Ok(_) => {
                report.push(format!("MISMATCH {}", a.name));
                bad.push(a.name.clone());
            }
            Err(_) => {
                report.push(format!("MISSING  {}", a.name));
                bad.push(a.name.clone());
            }
        }
    }
    for line in &report {
        println!("{line}");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{} artifact(s) failed verification: {}", bad.len(), bad.join(", "))))
    }
}
