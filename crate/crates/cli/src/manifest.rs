// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Written once by every artifact-producing command. `plan` is the merged
/// effective configuration and is enough to rerun the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub workdir: PathBuf,
    pub plan: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, u64>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, workdir: &Path, plan: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            workdir: workdir.to_path_buf(),
            plan,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
            metrics: serde_json::Value::Null,
        }
    }

    /// Record an input file with its content hash. `shown` is the path as
    /// given on the command line.
    pub fn add_input(&mut self, shown: &Path, resolved: &Path) -> Result<(), CliError> {
        self.inputs.push(InputRecord { path: shown.display().to_string(), sha256: hash_path(resolved)? });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(cuetrace::Error::from)?;
        cuetrace::report::write_file(path, format!("{text}\n").as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad manifest {}: {e}", path.display())))
    }
}

/// SHA-256 of a file, or of every file under a directory in sorted order.
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    for f in files {
        if path.is_dir() {
            h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        }
        let bytes = std::fs::read(&f).map_err(|e| cuetrace::Error::Io { path: f.clone(), source: e })?;
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| cuetrace::Error::Io { path: path.to_path_buf(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == "manifest.json") {
                continue;
            }
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}
