//! Output directory bookkeeping: metrics, CSV files and the run manifest.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};

/// `git describe --always --dirty` of the source tree, or `"unknown"`.
pub fn git_describe() -> String {
    Command::new("git")
        .args([
            "-C",
            env!("CARGO_MANIFEST_DIR"),
            "describe",
            "--always",
            "--dirty",
        ])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// One subcommand invocation writing into its own directory.
#[derive(Debug)]
pub struct Run {
    pub command: String,
    pub dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    metrics: Map<String, Value>,
    files: Vec<String>,
}

impl Run {
    pub fn create(command: &str, out: &Path, seed: u64, jobs: usize) -> Result<Self> {
        let dir = out.join(command);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            command: command.into(),
            dir,
            seed,
            jobs,
            metrics: Map::new(),
            files: Vec::new(),
        })
    }

    /// Path of an artifact inside the run directory; it is listed in the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
        self.dir.join(name)
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.metrics.insert(key.into(), v);
    }

    pub fn metrics(&self) -> &Map<String, Value> {
        &self.metrics
    }

    /// Header plus one serialized row per item. An empty slice still gets
    /// the header, taken from `header`.
    pub fn write_csv<T: Serialize>(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[T],
    ) -> Result<PathBuf> {
        let path = self.file(name);
        write_csv(&path, header, rows)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, serde_json::to_vec_pretty(value)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Writes `metrics.csv` and `manifest.json`.
    pub fn finish<C: Serialize>(mut self, config: &C) -> Result<()> {
        let rows: Vec<(String, String)> = self
            .metrics
            .iter()
            .map(|(k, v)| {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), text)
            })
            .collect();
        self.write_csv("metrics.csv", &["metric", "value"], &rows)?;
        let manifest = serde_json::json!({
            "command": self.command,
            "seed": self.seed,
            "jobs": self.jobs,
            "git_describe": git_describe(),
            "config": config,
            "metrics": self.metrics,
            "files": self.files,
        });
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Header row, then `rows` serialized without their own header.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
