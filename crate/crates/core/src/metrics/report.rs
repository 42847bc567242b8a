use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation (n − 1) of per-fold values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// A single value yields std 0 and logs a warning.
pub fn aggregate_folds(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Degenerate("no values to aggregate".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        log::warn!("standard deviation of a single value reported as 0");
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate { mean, std, n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Missing keys are metrics that could not be computed for this row.
    pub values: BTreeMap<String, f64>,
}

/// Per-row (usually per-fold) metric values with a mean ± std summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub cohort: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, cohort: impl Into<String>, columns: &[&str]) -> Self {
        MetricReport {
            task: task.into(),
            cohort: cohort.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Append a row; keys outside `columns` extend the column list.
    pub fn push(&mut self, label: impl Into<String>, values: BTreeMap<String, f64>) {
        for k in values.keys() {
            if !self.columns.contains(k) {
                self.columns.push(k.clone());
            }
        }
        self.rows.push(ReportRow {
            label: label.into(),
            values,
        });
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.values.get(name).copied()).collect()
    }

    /// Aggregate of each column over the rows where it is present.
    pub fn summary(&self) -> BTreeMap<String, Aggregate> {
        self.columns
            .iter()
            .filter_map(|c| aggregate_folds(&self.column(c)).ok().map(|a| (c.clone(), a)))
            .collect()
    }

    /// Rows as plain numbers followed by one `mean±std` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
        let mut header = vec!["row".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            rec.extend(
                self.columns
                    .iter()
                    .map(|c| r.values.get(c).map(|v| format!("{v:.6}")).unwrap_or_default()),
            );
            w.write_record(&rec).map_err(csv_err)?;
        }
        let summary = self.summary();
        let mut rec = vec!["mean±std".to_string()];
        rec.extend(
            self.columns
                .iter()
                .map(|c| summary.get(c).map(|a| a.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec).map_err(csv_err)?;
        w.flush().map_err(|e| Error::Data(format!("writing CSV: {e}")))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "task": self.task,
            "cohort": self.cohort,
            "columns": self.columns,
            "rows": self.rows,
            "summary": self.summary(),
        })
    }

    /// `<stem>.csv` and `<stem>.json` next to each other.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let csv_path = stem.with_extension("csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)?;
        let json_path = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }
}
