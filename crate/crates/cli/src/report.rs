use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use s2rm_core::suites::{Check, Status};

/// Everything outside `timings` is a deterministic function of the
/// invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config: Value,
    pub checks: Vec<Check>,
    /// Command-specific payload.
    #[serde(skip_serializing_if = "Value::is_null")]
    pub results: Value,
    /// Files written, relative to the artifacts directory.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
    pub timings: Timings,
    /// Extra lines for the stderr summary.
    #[serde(skip)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub total_s: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub entries: BTreeMap<String, f64>,
    /// Warnings derived from timings (e.g. a benchmark speedup below 1).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            checks: Vec::new(),
            results: Value::Null,
            artifacts: Vec::new(),
            timings: Timings::default(),
            notes: Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        self.checks.iter().any(|c| c.status == Status::Fail)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One line per check plus warnings, for stderr.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = match c.status {
                Status::Pass => "pass",
                Status::Fail => "FAIL",
                Status::Skip => "skip",
            };
            out.push_str(&format!("{status:4}  {}", c.name));
            if let Some(m) = c.metric {
                out.push_str(&format!("  metric={m:.3e}"));
            }
            if let Some(d) = &c.detail {
                out.push_str(&format!("  ({d})"));
            }
            out.push('\n');
        }
        for n in &self.notes {
            out.push_str(&format!("      {n}\n"));
        }
        for w in &self.timings.warnings {
            out.push_str(&format!("warn  {w}\n"));
        }
        let fails = self
            .checks
            .iter()
            .filter(|c| c.status == Status::Fail)
            .count();
        out.push_str(&format!(
            "{}: {} checks, {fails} failed, {:.2}s\n",
            self.command,
            self.checks.len(),
            self.timings.total_s
        ));
        out
    }
}
