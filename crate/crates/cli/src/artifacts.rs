//! Report and data files named `<command>.<kind>.{json,csv}`, plus the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Full-precision float for CSV cells.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:.16e}")
    }
}

pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
    Missing,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(x) => fmt_f64(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(t) => t.clone(),
            Cell::Missing => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Missing, Cell::Float)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: String,
    pub path: PathBuf,
    pub sha256: String,
}

pub struct ArtifactWriter {
    out_dir: PathBuf,
    command: String,
    records: Vec<ArtifactRecord>,
}

impl ArtifactWriter {
    pub fn new(out_dir: &Path, command: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            records: Vec::new(),
        })
    }

    pub fn path_for(&self, kind: &str, ext: &str) -> PathBuf {
        self.out_dir.join(format!("{}.{kind}.{ext}", self.command))
    }

    fn write(&mut self, kind: &str, ext: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path_for(kind, ext);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.records.push(ArtifactRecord {
            kind: kind.to_string(),
            path: path.clone(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, kind: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(kind, "json", text.as_bytes())
    }

    pub fn csv(
        &mut self,
        kind: &str,
        header: &[String],
        rows: &[Vec<Cell>],
    ) -> anyhow::Result<PathBuf> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            let line: Vec<String> = row.iter().map(Cell::render).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        self.write(kind, "csv", text.as_bytes())
    }

    pub fn records(&self) -> &[ArtifactRecord] {
        &self.records
    }
}

/// Column names `prefix_1 .. prefix_d`.
pub fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the canonical JSON of the effective config (after flag overrides).
    pub config_sha256: String,
    pub seed: u64,
    pub jobs: usize,
    pub tolerance_profile: String,
    pub exit_code: i32,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
}
