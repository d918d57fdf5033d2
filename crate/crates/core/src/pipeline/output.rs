//! Output directory with a checksummed manifest, plot fragments and the
//! machine-readable error document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub struct OutputDir {
    root: PathBuf,
    files: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<OutputDir> {
        fs::create_dir_all(root)?;
        Ok(OutputDir { root: root.to_path_buf(), files: vec![] })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.root.join(name), bytes)?;
        self.files.push(ManifestEntry { path: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// Renders into a buffer with `f`, then writes it as `name`.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = vec![];
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_plot(&mut self, name: &str, points: &[PlotPoint]) -> Result<()> {
        self.write_with(name, |buf| write_plot_csv(buf, points))
    }

    /// Writes `manifest.json`, which lists every file written so far.
    pub fn finish(self, command: &str, seed: u64) -> Result<Manifest> {
        let manifest = Manifest { command: command.to_string(), seed, files: self.files };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checks that every manifest entry exists with the recorded size and hash.
pub fn verify_manifest(root: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(root.join(MANIFEST_NAME)).map_err(|_| Error::InputNotFound(MANIFEST_NAME.into()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Io(e.to_string()))?;
    for f in &m.files {
        let bytes = fs::read(root.join(&f.path)).map_err(|_| Error::InputNotFound(f.path.clone()))?;
        if bytes.len() as u64 != f.bytes || sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Io(format!("{} does not match its manifest entry", f.path)));
        }
    }
    Ok(m)
}

/// One point of a plot-ready series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

impl PlotPoint {
    pub fn new(x: f64, y: f64, series: impl Into<String>) -> Self {
        Self { x, y, series: series.into() }
    }
}

pub fn write_plot_csv<W: std::io::Write>(out: W, points: &[PlotPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "series"])?;
    for p in points {
        w.write_record([format!("{:.12e}", p.x), format!("{:.12e}", p.y), p.series.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// `{"error":{"module":..,"kind":..,"message":..}}`
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": { "module": e.module(), "kind": e.kind(), "message": e.to_string() } }).to_string()
}
