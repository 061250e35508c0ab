//! Artifact output: atomic file writes, config hashing, and the JSON/CSV
//! serialization helpers every benchmark report goes through.
//!
//! Determinism contract: a result artifact (JSON or CSV) is a pure function of
//! the run configuration and seed — rerunning a benchmark, serially or in
//! parallel, reproduces it byte for byte. Wall-clock measurements are kept out
//! of result artifacts and written to separate timing files, which are exempt
//! from that contract.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Write `bytes` to `path` atomically: the data lands in a temporary sibling
/// file first and is renamed into place, so readers never observe a partial
/// artifact. Parent directories are created as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a writable path: {}", path.display())))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

/// SHA-256 of `bytes`, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    crate::model::hex(&Sha256::digest(bytes))
}

/// Canonical hash of any serializable configuration: SHA-256 over its JSON
/// encoding. Struct fields serialize in declaration order, so the hash is
/// stable for a given config type and value.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

/// Provenance block embedded in every artifact.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    /// Hash of the effective run configuration.
    pub config_hash: String,
    /// Master seed of the run.
    pub seed: u64,
}

impl RunStamp {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> RunStamp {
        RunStamp { config_hash: config_hash.into(), seed }
    }
}

/// Pretty-printed JSON through the atomic writer, with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// RFC-4180-style field quoting: fields containing commas, quotes, or line
/// breaks are wrapped in double quotes with inner quotes doubled.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write a CSV table (header plus rows) atomically with `\n` line endings.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "csv row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        out.push_str(&row.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// `mean±stderr` with four decimals — the cell format of the summary tables.
pub fn mean_pm(mean: f64, stderr: f64) -> String {
    format!("{mean:.4}±{stderr:.4}")
}

/// Wall-clock phase timings, kept separate from deterministic results.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TimingLog {
    pub phases: Vec<TimedPhase>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimedPhase {
    pub phase: String,
    pub seconds: f64,
}

impl TimingLog {
    pub fn new() -> TimingLog {
        TimingLog::default()
    }

    pub fn record(&mut self, phase: impl Into<String>, seconds: f64) {
        self.phases.push(TimedPhase { phase: phase.into(), seconds });
    }

    /// Run `f`, recording its wall-clock duration under `phase`.
    pub fn time<T>(&mut self, phase: impl Into<String>, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.record(phase, start.elapsed().as_secs_f64());
        out
    }

    pub fn seconds_for(&self, phase: &str) -> Option<f64> {
        self.phases.iter().find(|p| p.phase == phase).map(|p| p.seconds)
    }

    /// Write `{stem}.json` and `{stem}.csv` next to the main artifacts, kept
    /// out of the result files so wall-clock noise never perturbs their bytes.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_json(&dir.join(format!("{stem}.json")), self)?;
        let header = vec!["phase".to_string(), "seconds".to_string()];
        let rows: Vec<Vec<String>> = self
            .phases
            .iter()
            .map(|p| vec![p.phase.clone(), format!("{:.6}", p.seconds)])
            .collect();
        write_csv(&dir.join(format!("{stem}.csv")), &header, &rows)
    }
}
