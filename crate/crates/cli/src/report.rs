//! Run reports: config hash, metric summary, the acceptance table and the
//! versions of every written artifact.

use std::fmt::Write as _;

use serde::Serialize;

use sego_core::verify::{Check, Status};

use crate::config::ReportFormat;

pub const CRITERIA: [(u8, &str); 11] = [
    (1, "kernel rows sum to one"),
    (2, "detailed balance (stochastic) and greedy violation"),
    (3, "kernel invariance"),
    (4, "unbiased normalizer estimate"),
    (5, "chain sequences need no normalization"),
    (6, "q* optimality"),
    (7, "corrected evidence bound"),
    (8, "DP and Monte-Carlo agreement"),
    (9, "end-to-end training trends"),
    (10, "ablation ordering"),
    (11, "metrics determinism"),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub iterations: usize,
    pub warmed_success_rate: f64,
    pub final_success_rate: f64,
    pub first_quarter_valid_fraction: Option<f64>,
    pub last_quarter_valid_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub kind: String,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsSummary>,
    pub criteria: Vec<CriterionResult>,
    pub artifacts: Vec<Artifact>,
}

impl RunReport {
    /// Every criterion starts as SKIP; commands fill in what they measured.
    pub fn new(command: &str, config_hash: String) -> Self {
        let criteria = CRITERIA
            .iter()
            .map(|&(id, name)| CriterionResult {
                id,
                name: name.into(),
                status: Status::Skip,
                detail: format!("not evaluated by `{command}`"),
            })
            .collect();
        RunReport { command: command.into(), config_hash, metrics: None, criteria, artifacts: Vec::new() }
    }

    pub fn set(&mut self, id: u8, status: Status, detail: impl Into<String>) {
        let c = self.criteria.iter_mut().find(|c| c.id == id).expect("criterion id in 1..=11");
        c.status = status;
        c.detail = detail.into();
    }

    /// Folds verify checks into criteria 1-8 by check-id prefix.
    pub fn absorb_checks(&mut self, checks: &[Check]) {
        let groups: [(u8, &[&str]); 8] = [
            (1, &["L1"]),
            (2, &["L2"]),
            (3, &["L3"]),
            (4, &["P3-"]),
            (5, &["Zg"]),
            (6, &["P2-"]),
            (7, &["P1-"]),
            (8, &["DPMC"]),
        ];
        for (id, prefixes) in groups {
            let mine: Vec<&Check> = checks.iter().filter(|c| prefixes.iter().any(|p| c.id.starts_with(p))).collect();
            if mine.is_empty() {
                continue;
            }
            let status = if mine.iter().any(|c| c.status == Status::Fail) {
                Status::Fail
            } else if mine.iter().all(|c| c.status == Status::Skip) {
                Status::Skip
            } else {
                Status::Pass
            };
            let detail = mine.iter().map(|c| format!("{} {}", c.id, c.status)).collect::<Vec<_>>().join("; ");
            self.set(id, status, detail);
        }
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Toml => toml::to_string(self).expect("report serializes"),
            ReportFormat::Text => {
                let mut s = String::new();
                writeln!(s, "command: {}", self.command).unwrap();
                writeln!(s, "config_hash: {}", self.config_hash).unwrap();
                if let Some(m) = &self.metrics {
                    writeln!(
                        s,
                        "iterations: {}  warmed: {:.4}  final: {:.4}",
                        m.iterations, m.warmed_success_rate, m.final_success_rate
                    )
                    .unwrap();
                }
                for c in &self.criteria {
                    writeln!(s, "{:>2} {} {}: {}", c.id, c.status, c.name, c.detail).unwrap();
                }
                for a in &self.artifacts {
                    writeln!(s, "artifact {} ({}, v{})", a.path, a.kind, a.version).unwrap();
                }
                s
            }
        }
    }
}
