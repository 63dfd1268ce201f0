//! Run report: one JSON object per run. See `REPORT_SCHEMA.md`.

use std::collections::BTreeMap;

use outerprod::verify::CheckRecord;
use serde::Serialize;

use crate::config::RunConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub name: &'static str,
    pub version: &'static str,
}

impl Artifact {
    pub fn current() -> Self {
        Artifact {
            name: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub suite: String,
    pub status: Status,
    /// `null` when the value is not finite.
    pub max_rel_err: Option<f64>,
    pub tolerance: f64,
    /// Wall time of the whole suite; `null` unless timings were requested.
    pub runtime_ms: Option<f64>,
    pub counters: BTreeMap<String, f64>,
}

impl CheckReport {
    pub fn from_record(suite: &str, rec: CheckRecord, runtime_ms: Option<f64>) -> Self {
        CheckReport {
            status: if rec.passed() { Status::Pass } else { Status::Fail },
            name: rec.name,
            suite: suite.to_string(),
            max_rel_err: rec.value.is_finite().then_some(rec.value),
            tolerance: rec.tolerance,
            runtime_ms,
            counters: rec.counters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub passed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub artifact: Artifact,
    pub config: RunConfig,
    pub checks: Vec<CheckReport>,
    pub summary: Summary,
}

impl Report {
    pub fn new(config: RunConfig, checks: Vec<CheckReport>) -> Self {
        let passed = checks.iter().filter(|c| c.status == Status::Pass).count();
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            artifact: Artifact::current(),
            config,
            summary: Summary {
                passed,
                failed: checks.len() - passed,
            },
            checks,
        }
    }

    pub fn all_passed(&self) -> bool {
        self.summary.failed == 0
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serializable");
        s.push('\n');
        s
    }
}
