use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use gaunet::io::{parse_dmap, parse_pgm};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub started: String,
    pub finished: String,
    pub config: Value,
    /// Relative path → SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
}

/// Output directory plus the list of files written into it.
pub struct Run {
    pub out: PathBuf,
    command: String,
    started: String,
    config: Value,
    artifacts: Vec<String>,
}

impl Run {
    pub fn new(command: &str, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            command: command.into(),
            started: chrono::Utc::now().to_rfc3339(),
            config: Value::Null,
            artifacts: Vec::new(),
        })
    }

    pub fn set_config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn record(&mut self, rel: impl Into<String>) {
        self.artifacts.push(rel.into());
    }

    pub fn record_all(&mut self, prefix: &str, rels: Vec<String>) {
        for r in rels {
            self.record(format!("{prefix}{r}"));
        }
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel);
        Ok(())
    }

    /// Hashes every recorded artifact and writes `manifest.json`. Artifacts
    /// are re-read and checked against their format unless the run failed.
    pub fn finish(self, outcome: &Result<()>) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        let mut problem = None;
        for rel in &self.artifacts {
            match std::fs::read(self.out.join(rel)) {
                Ok(bytes) => {
                    if outcome.is_ok() {
                        if let Err(e) = validate(rel, &bytes) {
                            problem.get_or_insert(format!("{rel}: {e:#}"));
                        }
                    }
                    artifacts.insert(rel.clone(), hex::encode(Sha256::digest(&bytes)));
                }
                Err(e) => {
                    problem.get_or_insert(format!("{rel}: {e}"));
                }
            }
        }
        let error = match outcome {
            Err(e) => Some(format!("{e:#}")),
            Ok(()) => problem.clone(),
        };
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").into(),
            status: if error.is_none() { "ok".into() } else { "error".into() },
            error: error.clone(),
            started: self.started,
            finished: chrono::Utc::now().to_rfc3339(),
            config: self.config,
            artifacts,
        };
        std::fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        if outcome.is_ok() {
            if let Some(p) = problem {
                bail!("artifact validation failed: {p}");
            }
        }
        Ok(())
    }
}

/// Parses an artifact according to its extension.
fn validate(rel: &str, bytes: &[u8]) -> Result<()> {
    let ext = Path::new(rel).extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => {
            serde_json::from_slice::<Value>(bytes)?;
        }
        "csv" => {
            let mut reader = csv::Reader::from_reader(bytes);
            let width = reader.headers()?.len();
            for row in reader.records() {
                if row?.len() != width {
                    bail!("ragged row");
                }
            }
        }
        "dmap" | "dmap-input" => {
            parse_dmap(bytes)?;
        }
        "pgm" => {
            parse_pgm(bytes)?;
        }
        _ => {}
    }
    Ok(())
}
