//! Run manifests: what went in, what came out, and content hashes of both.
//!
//! Hashes are git blob ids (SHA-1 over `blob <len>\0<content>`), so they
//! can be compared against `git hash-object`. Everything that varies between
//! identical runs (timestamps, wall-clock) lives in `timing.json` and
//! `timing.csv`, outside the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::ExportError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_JSON: &str = "timing.json";

pub fn git_blob_sha1(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub inputs: BTreeMap<String, InputRecord>,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub tolerances: Option<Tolerances>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    /// File name to hash, for every output but the manifest and timings.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds since the Unix epoch at start.
    pub started_unix: f64,
    pub total_ms: f64,
    pub step1_ms: f64,
    pub step2_ms: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            tool: format!("dispatch {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            inputs: BTreeMap::new(),
            variant: None,
            seed: None,
            tolerances: None,
            converged: None,
            iterations: None,
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path, content: &[u8]) {
        self.inputs.insert(
            role.into(),
            InputRecord {
                path: path.display().to_string(),
                sha1: git_blob_sha1(content),
            },
        );
    }

    /// Hashes the listed output files (by their names inside the bundle).
    pub fn add_outputs(&mut self, files: &[PathBuf]) -> Result<(), ExportError> {
        for path in files {
            let bytes = read(path)?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            self.outputs.insert(name, git_blob_sha1(&bytes));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, ExportError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|source| ExportError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self, ExportError> {
        let bytes = read(&dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Names of inputs and outputs whose current content no longer matches
    /// the recorded hash (missing files count as mismatches).
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for (role, rec) in &self.inputs {
            match fs::read(&rec.path) {
                Ok(b) if git_blob_sha1(&b) == rec.sha1 => {}
                _ => bad.push(format!("input {role} ({})", rec.path)),
            }
        }
        for (name, sha) in &self.outputs {
            match fs::read(dir.join(name)) {
                Ok(b) if git_blob_sha1(&b) == *sha => {}
                _ => bad.push(format!("output {name}")),
            }
        }
        bad
    }
}

pub fn write_timing(dir: &Path, timing: &Timing) -> Result<PathBuf, ExportError> {
    let path = dir.join(TIMING_JSON);
    let mut text = serde_json::to_string_pretty(timing)?;
    text.push('\n');
    fs::write(&path, text).map_err(|source| ExportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn read(path: &Path) -> Result<Vec<u8>, ExportError> {
    fs::read(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_hash_object() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_sha1(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(git_blob_sha1(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }
}
