//! Run manifests: everything needed to repeat a command.

use std::path::Path;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files::{atomic_write, read_text};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    /// Canonical config text in force for the run.
    pub config: String,
    pub seed: u64,
    pub git_describe: String,
    pub start_unix: u64,
    /// Filled in once, when the command finishes successfully.
    pub end_unix: Option<u64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn begin(command: &str, args: &[String], config: String, seed: u64, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            config,
            seed,
            git_describe: git_describe(),
            start_unix: now_unix(),
            end_unix: None,
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        atomic_write(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())
    }

    /// Stamps the end time and rewrites the file. Nothing else changes.
    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.end_unix = Some(now_unix());
        self.write(dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = read_text(&p)?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(&p, e.to_string()))
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `git describe` of the working directory, or `unknown` outside a checkout.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::begin("gen-data", &["--seeds".into(), "0-3".into()], "seed = 1\n".into(), 1, vec!["a".into()]);
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
        m.finish(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert!(back.end_unix.unwrap() >= back.start_unix);
    }
}
