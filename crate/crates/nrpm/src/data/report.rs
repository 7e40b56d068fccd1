//! CSV experiment reports.
//!
//! Schema: `method,lambda,epsilon,natural_acc,robust_acc,attack,seed` with
//! four decimal places on every numeric column except the integer seed, rows
//! ordered by method, then λ descending, then ε ascending. Writing the same
//! report twice produces byte-identical files.

use crate::{Error, Result};
use std::path::Path;

pub const REPORT_HEADER: &str = "method,lambda,epsilon,natural_acc,robust_acc,attack,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub lambda: f64,
    pub epsilon: f64,
    pub natural_acc: f64,
    pub robust_acc: f64,
    pub attack: String,
    pub seed: u64,
}

/// Natural/robust accuracy grid over budgets and λ settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn new() -> Self {
        ExperimentReport::default()
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    fn sorted_rows(&self) -> Vec<&ReportRow> {
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            a.method
                .cmp(&b.method)
                .then(b.lambda.partial_cmp(&a.lambda).expect("finite λ"))
                .then(a.epsilon.partial_cmp(&b.epsilon).expect("finite ε"))
        });
        rows
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in self.sorted_rows() {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{},{}\n",
                r.method, r.lambda, r.epsilon, r.natural_acc, r.robust_acc, r.attack, r.seed
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == REPORT_HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "bad report header: {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 7 {
                return Err(Error::Format(format!(
                    "line {}: expected 7 fields, got {}",
                    ln + 2,
                    parts.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number {s:?}", ln + 2)))
            };
            rows.push(ReportRow {
                method: parts[0].to_string(),
                lambda: num(parts[1])?,
                epsilon: num(parts[2])?,
                natural_acc: num(parts[3])?,
                robust_acc: num(parts[4])?,
                attack: parts[5].to_string(),
                seed: parts[6]
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad seed", ln + 2)))?,
            });
        }
        Ok(ExperimentReport { rows })
    }
}
