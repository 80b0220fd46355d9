//! Run report files: config echo, CSV tables, and the JSON summary.
//!
//! Reports are designed to be byte-identical across re-runs: floats use
//! Rust's shortest-roundtrip formatting, maps are ordered, and nothing
//! records wall-clock time. One run directory holds `config.echo`,
//! `summary.json`, and one CSV per table.

use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::File;
use std::path::{Path, PathBuf};

/// One pass/fail record. `estimate` is the measured quantity, `target` the
/// reference value or bound, `tolerance` the allowed slack around it.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub estimate: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when |estimate - target| <= tolerance.
    pub fn near(name: impl Into<String>, estimate: f64, target: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            estimate,
            target,
            tolerance,
            pass: (estimate - target).abs() <= tolerance,
        }
    }

    /// Passes when estimate <= target + tolerance.
    pub fn at_most(name: impl Into<String>, estimate: f64, target: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            estimate,
            target,
            tolerance,
            pass: estimate <= target + tolerance,
        }
    }

    /// Passes when estimate >= target - tolerance.
    pub fn at_least(name: impl Into<String>, estimate: f64, target: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            estimate,
            target,
            tolerance,
            pass: estimate >= target - tolerance,
        }
    }
}

/// The single JSON summary of a run.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

impl Summary {
    pub fn new(experiment: impl Into<String>, seed: u64, config: BTreeMap<String, String>) -> Self {
        Summary {
            experiment: experiment.into(),
            seed,
            config,
            checks: Vec::new(),
            all_pass: true,
        }
    }

    pub fn push(&mut self, check: Check) {
        self.all_pass &= check.pass;
        self.checks.push(check);
    }
}

/// Writer for one run directory.
#[derive(Debug)]
pub struct Reporter {
    dir: PathBuf,
}

impl Reporter {
    /// Create (or reuse) the run directory.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Reporter { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `config.echo`: every effective setting, one `key = value` per line.
    pub fn write_config_echo(&self, echo: &BTreeMap<String, String>) -> Result<()> {
        let path = self.path("config.echo");
        let mut text = String::new();
        for (k, v) in echo {
            text.push_str(k);
            text.push_str(" = ");
            text.push_str(v);
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Open a CSV table and write its fixed header.
    pub fn csv(&self, name: &str, header: &[&str]) -> Result<CsvTable> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(header)
            .map_err(|e| Error::invalid("csv", e.to_string()))?;
        Ok(CsvTable {
            writer,
            path,
            width: header.len(),
        })
    }

    pub fn write_summary(&self, summary: &Summary) -> Result<()> {
        let path = self.path("summary.json");
        let mut text = serde_json::to_string_pretty(summary)
            .map_err(|e| Error::invalid("summary", e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// One open CSV file with a fixed column count.
pub struct CsvTable {
    writer: csv::Writer<File>,
    path: PathBuf,
    width: usize,
}

impl CsvTable {
    /// Write one row; fields are formatted with their `Display` impls
    /// (shortest-roundtrip for floats).
    pub fn row(&mut self, fields: &[&dyn Display]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.width, "{}", self.path.display());
        self.writer
            .write_record(fields.iter().map(|f| f.to_string()))
            .map_err(|e| Error::invalid("csv", e.to_string()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io(&self.path, e))
    }
}
