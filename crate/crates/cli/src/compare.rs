//! Regression comparison of two benchmark CSVs.
//!
//! Output identity is the property that matters: a speculation change that
//! alters the emitted token count broke losslessness, and the comparison
//! exit status must say so. Metric drift (tau, pass counts, simulated time)
//! is reported but tolerated; wall time is ignored outright.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use specq_core::{Error, Result};

use crate::bench::{BenchRow, CSV_HEADER};

/// One per-prompt metric change between report A and report B.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricChange {
    pub prompt_id: String,
    pub before: f64,
    pub after: f64,
}

/// Differences between two benchmark reports sharing a prompt set.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows_compared: usize,
    /// Prompts whose emitted token count changed: the speculation no longer
    /// reproduces the reference output.
    pub losslessness_failures: Vec<String>,
    pub tau_changes: Vec<MetricChange>,
    pub target_forward_changes: Vec<MetricChange>,
    pub max_abs_sim_delta_s: f64,
}

impl CompareReport {
    /// True when nothing but wall time differs.
    pub fn identical(&self) -> bool {
        self.losslessness_failures.is_empty()
            && self.tau_changes.is_empty()
            && self.target_forward_changes.is_empty()
            && self.max_abs_sim_delta_s == 0.0
    }

    /// Comparison verdict for process exit: losslessness regressions fail.
    pub fn passed(&self) -> bool {
        self.losslessness_failures.is_empty()
    }
}

/// Reads a benchmark CSV, insisting on the exact header this tool writes.
pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(Error::input(format!(
            "{}: header is {header:?}, expected {CSV_HEADER:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (idx, record) in reader.deserialize::<BenchRow>().enumerate() {
        rows.push(
            record
                .map_err(|e| Error::input(format!("{}: row {}: {e}", path.display(), idx + 1)))?,
        );
    }
    Ok(rows)
}

/// Compares two row sets by prompt id. The id sets must match exactly.
pub fn compare_report(a: &[BenchRow], b: &[BenchRow]) -> Result<CompareReport> {
    let index = |rows: &[BenchRow]| -> Result<BTreeMap<String, BenchRow>> {
        let mut map = BTreeMap::new();
        for row in rows {
            if map.insert(row.prompt_id.clone(), row.clone()).is_some() {
                return Err(Error::input(format!("duplicate prompt id {:?}", row.prompt_id)));
            }
        }
        Ok(map)
    };
    let a = index(a)?;
    let b = index(b)?;
    if a.len() != b.len() || a.keys().ne(b.keys()) {
        let only_a: Vec<_> = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
        let only_b: Vec<_> = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
        return Err(Error::input(format!(
            "prompt ids do not match; only in A: {only_a:?}, only in B: {only_b:?}"
        )));
    }

    let mut report = CompareReport { rows_compared: a.len(), ..Default::default() };
    for (id, ra) in &a {
        let rb = &b[id];
        if ra.tokens != rb.tokens {
            report.losslessness_failures.push(id.clone());
        }
        if ra.tau != rb.tau {
            report.tau_changes.push(MetricChange {
                prompt_id: id.clone(),
                before: ra.tau,
                after: rb.tau,
            });
        }
        if ra.target_forwards != rb.target_forwards {
            report.target_forward_changes.push(MetricChange {
                prompt_id: id.clone(),
                before: ra.target_forwards as f64,
                after: rb.target_forwards as f64,
            });
        }
        report.max_abs_sim_delta_s = report.max_abs_sim_delta_s.max((ra.sim_s - rb.sim_s).abs());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, tau: f64, tokens: u64, forwards: u64) -> BenchRow {
        BenchRow {
            prompt_id: id.into(),
            category: "qa".into(),
            strategy: "sp".into(),
            d: 4,
            n: 0,
            k: 0,
            tau,
            tokens,
            target_forwards: forwards,
            wall_s: 0.0,
            sim_s: 1.0,
            draft_latency_s: 0.0,
        }
    }

    #[test]
    fn identical_reports_produce_an_empty_diff() {
        let rows = vec![row("a", 2.0, 16, 8), row("b", 4.0, 16, 4)];
        let report = compare_report(&rows, &rows).unwrap();
        assert!(report.identical());
        assert!(report.passed());
        assert_eq!(report.rows_compared, 2);
    }

    #[test]
    fn token_count_changes_fail_and_tau_changes_only_flag() {
        let a = vec![row("a", 2.0, 16, 8), row("b", 4.0, 16, 4)];
        // Prompt a: same output, different acceptance. Prompt b: output
        // changed, which is the regression that must gate.
        let b = vec![row("a", 2.667, 16, 6), row("b", 4.0, 12, 3)];
        let report = compare_report(&a, &b).unwrap();
        assert_eq!(report.losslessness_failures, vec!["b".to_string()]);
        assert!(!report.passed());
        assert_eq!(report.tau_changes.len(), 1);
        assert_eq!(report.tau_changes[0].prompt_id, "a");
        assert_eq!(report.target_forward_changes.len(), 2);
    }

    #[test]
    fn mismatched_prompt_sets_are_an_error_not_a_diff() {
        let a = vec![row("a", 2.0, 16, 8)];
        let b = vec![row("z", 2.0, 16, 8)];
        let err = compare_report(&a, &b).unwrap_err().to_string();
        assert!(err.contains("only in A"), "{err}");
        assert!(err.contains('z'), "{err}");
    }

    #[test]
    fn wall_time_never_participates_in_the_diff() {
        let a = vec![row("a", 2.0, 16, 8)];
        let mut b = a.clone();
        b[0].wall_s = 123.0;
        assert!(compare_report(&a, &b).unwrap().identical());
    }
}
