//! Per-trial records, aggregates and report formats.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use steer_core::steering::GuidanceConfig;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: String,
    pub trial: usize,
    pub executed_index: usize,
    /// Mean per-state distance of the executed sample to the target.
    pub executed_l2: f64,
    /// Smallest mean per-state distance in the batch.
    pub batch_min_l2: f64,
    /// Batch mean of the per-state distance, over members that did not diverge.
    pub avg_l2: f64,
    pub mean_cost: f64,
    pub collision_rate: f64,
    pub executed_collision: bool,
    pub diverged: usize,
    pub goal_label: Option<usize>,
    pub intended_goal: Option<usize>,
    /// Mean pairwise distance between batch endpoints.
    pub endpoint_spread: f64,
}

impl TrialRecord {
    pub fn aligned(&self) -> Option<bool> {
        self.intended_goal.map(|g| self.goal_label == Some(g))
    }

    /// Collision-free and reaching some goal.
    pub fn success(&self) -> Option<bool> {
        self.intended_goal.map(|_| !self.executed_collision && self.goal_label.is_some())
    }
}

/// Fractions of goal trials by alignment and success.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub aligned_success: f64,
    pub aligned_failure: f64,
    pub misaligned_success: f64,
    pub misaligned_failure: f64,
    /// Counts in the same order; they add up to the number of trials.
    pub counts: [usize; 4],
}

impl TaskBreakdown {
    pub fn ta(&self) -> f64 {
        self.aligned_success + self.aligned_failure
    }

    pub fn cs(&self) -> f64 {
        self.aligned_success + self.misaligned_success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub policy: String,
    pub config: GuidanceConfig,
    pub trials: usize,
    /// Mean executed-sample distance (the reported Min L2).
    pub min_l2: f64,
    pub batch_min_l2: f64,
    pub avg_l2: f64,
    pub mean_cost: f64,
    pub collision: f64,
    pub executed_collision: f64,
    pub diverged: usize,
    pub endpoint_spread: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskBreakdown>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn breakdown(rows: &[&TrialRecord]) -> Option<TaskBreakdown> {
    let mut counts = [0usize; 4];
    for r in rows {
        let (a, s) = (r.aligned()?, r.success()?);
        counts[match (a, s) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }] += 1;
    }
    let n = rows.len().max(1) as f64;
    Some(TaskBreakdown {
        aligned_success: counts[0] as f64 / n,
        aligned_failure: counts[1] as f64 / n,
        misaligned_success: counts[2] as f64 / n,
        misaligned_failure: counts[3] as f64 / n,
        counts,
    })
}

pub fn summarize(label: &str, policy: &str, config: &GuidanceConfig, rows: &[&TrialRecord]) -> MethodSummary {
    let task = if rows.iter().all(|r| r.intended_goal.is_some()) && !rows.is_empty() { breakdown(rows) } else { None };
    MethodSummary {
        label: label.into(),
        policy: policy.into(),
        config: config.clone(),
        trials: rows.len(),
        min_l2: mean(rows.iter().map(|r| r.executed_l2)),
        batch_min_l2: mean(rows.iter().map(|r| r.batch_min_l2)),
        avg_l2: mean(rows.iter().map(|r| r.avg_l2)),
        mean_cost: mean(rows.iter().map(|r| r.mean_cost)),
        collision: mean(rows.iter().map(|r| r.collision_rate)),
        executed_collision: mean(rows.iter().map(|r| r.executed_collision as u8 as f64)),
        diverged: rows.iter().map(|r| r.diverged).sum(),
        endpoint_spread: mean(rows.iter().map(|r| r.endpoint_spread)),
        task,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    /// Mean wall-clock milliseconds per batch.
    pub ms_per_batch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub env: String,
    pub trials: usize,
    pub batch: usize,
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
    pub rows: Vec<TrialRecord>,
    /// Only filled when timing was requested, since it breaks byte-identical reruns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Vec<Timing>>,
}

impl MetricsReport {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }

    pub fn rows_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a TrialRecord> + 'a {
        self.rows.iter().filter(move |r| r.method == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let head = ["method", "policy", "min_l2", "batch_min", "avg_l2", "collision", "TA", "CS", "AS", "AF", "MS", "MF"];
        let body: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|m| {
                let f = |v: f64| format!("{v:.3}");
                let mut row = vec![m.label.clone(), m.policy.clone(), f(m.min_l2), f(m.batch_min_l2), f(m.avg_l2), f(m.collision)];
                match &m.task {
                    Some(t) => row.extend([t.ta(), t.cs(), t.aligned_success, t.aligned_failure, t.misaligned_success, t.misaligned_failure].map(f)),
                    None => row.extend(std::iter::repeat_n("-".to_string(), 6)),
                }
                row
            })
            .collect();
        let widths: Vec<usize> =
            (0..head.len()).map(|c| body.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> =
                cells.iter().zip(&widths).enumerate().map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") }).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(head.to_vec(), &mut out);
        for r in &body {
            line(r.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| crate::error::BenchError::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| crate::error::BenchError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
