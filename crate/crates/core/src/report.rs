//! Run reports and table output.
//!
//! Every runner subcommand folds its results into a [`VerificationReport`]:
//! a versioned header plus one [`CheckRecord`] per named check. The header
//! keeps the two volatile fields (`generated_at`, `wall_time_ms`) next to
//! each other so a reproducibility harness can mask exactly those lines and
//! byte-compare the rest. Everything else in the file is a pure function of
//! the config and the seed.
//!
//! CSV tables go through [`CsvTable`], which pins the column order and
//! stamps the config hash into a leading comment line. Floats are rendered
//! with Rust's shortest round-trip formatting, so equal numbers produce
//! equal bytes.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ParticleEnsemble;

/// Bumped whenever the report layout changes shape, so downstream tooling
/// can refuse files it does not understand.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One named check with its measured statistic and the tolerance it was
/// held against. `detail` carries the human-readable context (which leg,
/// which epsilon, auxiliary numbers) and is free-form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

/// The top-level result of a run. Field order is serialization order;
/// `generated_at` and `wall_time_ms` are the only fields allowed to differ
/// between two runs of the same config and seed, which is also why worker
/// counts and other environment facts stay out of the body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub generated_at: String,
    pub wall_time_ms: u64,
    pub config_hash: String,
    pub seed: u64,
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    /// Empty report carrying the run identity; checks are pushed as the
    /// suites finish.
    pub fn new(config_hash: &str, seed: u64) -> Self {
        VerificationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            generated_at: String::new(),
            wall_time_ms: 0,
            config_hash: config_hash.to_string(),
            seed,
            checks: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        name: &str,
        statistic: f64,
        tolerance: f64,
        passed: bool,
        detail: String,
    ) {
        self.checks.push(CheckRecord {
            name: name.to_string(),
            statistic,
            tolerance,
            passed,
            detail,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Names of the failing checks, in the order they were recorded.
    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: VerificationReport = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema {} is not the supported {}",
                report.schema_version, REPORT_SCHEMA_VERSION
            )));
        }
        Ok(report)
    }
}

/// A rectangular table rendered as CSV with a `# config_hash=...` comment
/// line on top. Rows are stored as preformatted cells so the renderer is a
/// trivial join and the byte output is stable.
#[derive(Debug, Clone)]
pub struct CsvTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        CsvTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row of already-formatted cells.
    pub fn push_row(&mut self, cells: Vec<String>) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(Error::Argument(format!(
                "row has {} cells, table has {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        self.rows.push(cells);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self, config_hash: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# schema={REPORT_SCHEMA_VERSION} config_hash={config_hash}\n"
        ));
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Shortest round-trip rendering for a float cell. Centralized so every
/// table agrees on the byte representation.
pub fn fmt_cell(x: f64) -> String {
    format!("{x}")
}

/// Path dump for one ensemble: a row per (particle, knot) with the state
/// coordinates spelled out.
pub fn ensemble_table(ens: &ParticleEnsemble) -> Result<CsvTable> {
    let states: &Array3<f64> = &ens.states;
    let (n, knots, d) = states.dim();
    let mut columns = vec!["particle".to_string(), "step".to_string(), "time".to_string()];
    for c in 0..d {
        columns.push(format!("x_{}", c + 1));
    }
    let refs: Vec<&str> = columns.iter().map(|c| c.as_str()).collect();
    let mut table = CsvTable::new(&refs);
    for i in 0..n {
        for k in 0..knots {
            let mut row = vec![i.to_string(), k.to_string(), fmt_cell(ens.grid.knot(k))];
            for c in 0..d {
                row.push(fmt_cell(states[[i, k, c]]));
            }
            table.push_row(row)?;
        }
    }
    Ok(table)
}

/// Sidecar written next to a path dump so the CSV alone is enough to
/// reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSidecar {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub particles: usize,
    pub steps: usize,
    pub horizon: f64,
}
