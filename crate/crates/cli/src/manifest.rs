//! Content hashes and per-command manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Git-style object hash: `sha256("blob <len>\0" ++ content)`, hex encoded.
pub fn git_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(git_hash(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

/// Files written by one command, relative to its output directory.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, content).map_err(|e| CliError::io(&p, e))?;
        self.record(name);
        Ok(())
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Writes `manifest_<command>.json` listing inputs and outputs with hashes.
    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig, inputs: &[&Path]) -> Result<Vec<String>> {
        let mut ins = inputs
            .iter()
            .map(|p| {
                Ok(FileEntry {
                    path: p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()),
                    sha256: hash_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ins.sort_by(|a, b| a.path.cmp(&b.path));
        let mut names = self.written.clone();
        names.sort();
        let outs = names
            .iter()
            .map(|n| {
                Ok(FileEntry {
                    path: n.clone(),
                    sha256: hash_file(&self.path(n))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            command,
            seed: cfg.seed,
            config: cfg,
            inputs: ins,
            outputs: outs,
        };
        let name = format!("manifest_{command}.json");
        self.write(&name, &(serde_json::to_string_pretty(&m)? + "\n"))?;
        Ok(self.written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_hash_known_value() {
        // printf 'blob 0\0' | sha256sum
        assert_eq!(git_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(git_hash(b"a"), git_hash(b"b"));
    }
}
