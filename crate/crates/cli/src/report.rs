use std::path::PathBuf;

use clap::Args;
use mtsunet::metrics::MetricReport;
use mtsunet::trainer::{classification_row, CLASSIFICATION_COLUMNS};

use crate::fail::{CliResult, Failure};
use crate::out::{prepare_out_dir, require_file, resolve_out};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV with `case_id`, `label` (0/1) and one or more probability
    /// columns, such as the `predictions.csv` written by `eval`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Probability columns to score; default all but case_id, label and
    /// predicted.
    #[arg(long = "column")]
    pub columns: Vec<String>,
    #[arg(long, default_value = "report")]
    pub task: String,
    #[arg(long, default_value = "default")]
    pub cohort: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: ReportArgs) -> CliResult {
    require_file(&args.predictions, "predictions file")?;
    let bad = |msg: String| Failure::data(format!("{}: {msg}", args.predictions.display()));
    let mut reader = csv::Reader::from_path(&args.predictions).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| bad("no 'label' column".into()))?;
    let wanted: Vec<String> = if args.columns.is_empty() {
        header
            .iter()
            .filter(|h| !matches!(h.as_str(), "case_id" | "label" | "predicted"))
            .cloned()
            .collect()
    } else {
        args.columns.clone()
    };
    let mut idx = Vec::new();
    for w in &wanted {
        let i = header
            .iter()
            .position(|h| h == w)
            .ok_or_else(|| Failure::usage(format!("column '{w}' not in {}", args.predictions.display())))?;
        idx.push(i);
    }
    if idx.is_empty() {
        return Err(bad("no probability columns".into()));
    }

    let mut labels = Vec::new();
    let mut probs = vec![Vec::new(); idx.len()];
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let cell = |c: usize| rec.get(c).unwrap_or("").trim();
        let label = match cell(label_col) {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("row {}: label '{other}' is not 0 or 1", row + 1))),
        };
        labels.push(label);
        for (k, &c) in idx.iter().enumerate() {
            let p: f64 = cell(c)
                .parse()
                .map_err(|_| bad(format!("row {}: '{}' is not a number", row + 1, cell(c))))?;
            probs[k].push(p);
        }
    }

    let mut report = MetricReport::new(args.task.as_str(), args.cohort.as_str(), &CLASSIFICATION_COLUMNS);
    for (name, p) in wanted.iter().zip(&probs) {
        report.push(name.as_str(), classification_row(p, &labels)?);
    }
    let out = resolve_out(args.out, "report")?;
    prepare_out_dir(&out, args.force)?;
    report.save(&out.join("report"))?;
    println!("scored {} column(s) over {} cases; report in {}", wanted.len(), labels.len(), out.join("report.csv").display());
    for r in &report.rows {
        let auc = r.values.get("AUC").map_or("degenerate".to_string(), |a| format!("{a:.4}"));
        println!("  {}: ACC {:.4} AUC {auc}", r.label, r.values["ACC"]);
    }
    Ok(())
}
