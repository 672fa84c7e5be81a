//! Per-run manifest: what ran, with which settings, on which inputs, and
//! what it wrote. Re-reading a manifest re-checks every digest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use chrono::{SecondsFormat, Utc};
use kbound::io::file_sha256;
use serde::{Deserialize, Serialize};

use crate::config::Settings;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_sha256(path).with_context(|| format!("hashing {}", path.display()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Settings,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub toolkit_version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub elapsed_ms: u64,
    /// Subcommand-specific summary (thresholds, counts, metrics).
    pub details: serde_json::Value,
}

/// Collects inputs and outputs while a subcommand runs.
pub struct RunRecorder {
    subcommand: String,
    settings: Settings,
    started_at: String,
    clock: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn start(subcommand: &str, settings: &Settings) -> Self {
        Self {
            subcommand: subcommand.to_owned(),
            settings: settings.clone(),
            started_at: now(),
            clock: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Inputs are hashed when registered, before anything can touch them.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        if !path.exists() {
            bail!("input {} does not exist", path.display());
        }
        if !self.inputs.iter().any(|d| d.path == path) {
            self.inputs.push(FileDigest::of(path)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        let path = path.into();
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
    }

    /// Writes `<stem>.run.json` next to the outputs and returns its path.
    pub fn finish(self, stem: &str, details: serde_json::Value) -> anyhow::Result<PathBuf> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| FileDigest::of(p))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let manifest = RunManifest {
            subcommand: self.subcommand,
            seed: self.settings.seed,
            toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
            inputs: self.inputs,
            outputs,
            started_at: self.started_at,
            finished_at: now(),
            elapsed_ms: self.clock.elapsed().as_millis() as u64,
            details,
            config: self.settings,
        };
        let path = manifest.config.out_dir.join(format!("{stem}.run.json"));
        kbound::io::write_json(&path, &manifest)?;
        Ok(path)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(kbound::io::read_json(path)?)
    }

    /// Files whose current digest differs from the recorded one.
    pub fn mismatches(&self) -> Vec<String> {
        self.inputs
            .iter()
            .chain(&self.outputs)
            .filter_map(|d| match file_sha256(&d.path) {
                Ok(h) if h == d.sha256 => None,
                Ok(_) => Some(format!("{}: checksum changed", d.path.display())),
                Err(e) => Some(format!("{}: {e}", d.path.display())),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_outputs_and_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let settings = Settings {
            out_dir: dir.path().to_path_buf(),
            ..Settings::default()
        };
        let input = dir.path().join("in.txt");
        let output = dir.path().join("out.txt");
        std::fs::write(&input, "q").unwrap();
        let mut rec = RunRecorder::start("probe", &settings);
        rec.input(&input).unwrap();
        std::fs::write(&output, "a").unwrap();
        rec.output(&output);
        let path = rec.finish("probe", serde_json::json!({"n": 1})).unwrap();

        let m = RunManifest::load(&path).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m.config, settings);
        assert!(m.mismatches().is_empty());
        std::fs::write(&output, "b").unwrap();
        assert_eq!(m.mismatches().len(), 1);
    }

    #[test]
    fn missing_inputs_are_refused() {
        let mut rec = RunRecorder::start("probe", &Settings::default());
        assert!(rec.input(Path::new("/nonexistent/questions.jsonl")).is_err());
    }
}
