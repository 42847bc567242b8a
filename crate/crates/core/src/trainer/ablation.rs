use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::report::cv_report;
use super::train::{cross_validate, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{ClassifierMode, ModelConfig};
use crate::tafe::StageSet;
use crate::volumes::{Case, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGrid {
    /// TAFE-only, CMD-only and the fused model.
    Modules,
    /// TAFE-1..4 with segmentation guidance, SwinT-1..4 without.
    Depth,
    /// Input sequence subsets, each with the TAFE and DSF heads.
    Sequences,
}

impl FromStr for AblationGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "modules" => Ok(AblationGrid::Modules),
            "depth" => Ok(AblationGrid::Depth),
            "sequences" => Ok(AblationGrid::Sequences),
            other => Err(Error::config(format!("unknown ablation grid '{other}' (modules, depth, sequences)"))),
        }
    }
}

impl fmt::Display for AblationGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationGrid::Modules => "modules",
            AblationGrid::Depth => "depth",
            AblationGrid::Sequences => "sequences",
        })
    }
}

pub const SEQUENCE_SUBSETS: [&[Modality]; 6] = [
    &[Modality::T1, Modality::T2],
    &[Modality::T1c, Modality::T2],
    &[Modality::T1c, Modality::Flair],
    &[Modality::T1, Modality::T1c, Modality::T2],
    &[Modality::T1, Modality::T1c, Modality::Flair],
    &[Modality::T1, Modality::T1c, Modality::T2, Modality::Flair],
];

pub const ABLATION_METRICS: [&str; 4] = ["ACC", "F1", "MCC", "AUC"];

/// One cell group of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub row: String,
    /// Column group; empty for single-column grids.
    pub column: String,
    pub model: ModelConfig,
}

/// Parse a depth row name: `TAFE-n` is guided, `SwinT-n` trains with α = 0.
pub fn depth_variant(name: &str, base: &ModelConfig) -> Result<AblationVariant> {
    let stages: StageSet = name.parse()?;
    let mut model = base.clone();
    model.head = ClassifierMode::Tafe;
    model.stages = stages;
    if name.trim().to_ascii_lowercase().starts_with("swint-") {
        model.loss.alpha = 0.0;
        model.freeze_segmentation = false;
    } else if model.loss.alpha == 0.0 {
        model.loss.alpha = 1.0;
    }
    Ok(AblationVariant {
        row: name.trim().to_string(),
        column: String::new(),
        model,
    })
}

pub fn ablation_variants(grid: AblationGrid, base: &ModelConfig) -> Result<Vec<AblationVariant>> {
    let mut out = Vec::new();
    match grid {
        AblationGrid::Modules => {
            for head in ClassifierMode::ALL {
                let mut model = base.clone();
                model.head = head;
                out.push(AblationVariant {
                    row: head.to_string(),
                    column: String::new(),
                    model,
                });
            }
        }
        AblationGrid::Depth => {
            for prefix in ["TAFE", "SwinT"] {
                for n in 1..=4 {
                    out.push(depth_variant(&format!("{prefix}-{n}"), base)?);
                }
            }
        }
        AblationGrid::Sequences => {
            for subset in SEQUENCE_SUBSETS {
                let row = subset.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+");
                for head in [ClassifierMode::Tafe, ClassifierMode::Dsf] {
                    let mut model = base.clone().with_modalities(subset.to_vec());
                    model.head = head;
                    out.push(AblationVariant {
                        row: row.clone(),
                        column: head.to_string(),
                        model,
                    });
                }
            }
        }
    }
    for v in &out {
        v.model
            .validate()
            .map_err(|e| Error::config(format!("ablation row {} {}: {e}", v.row, v.column)))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: String,
    pub column: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: AblationGrid,
    pub entries: Vec<AblationEntry>,
}

impl AblationTable {
    pub fn rows(&self) -> Vec<&str> {
        let mut rows: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !rows.contains(&e.row.as_str()) {
                rows.push(&e.row);
            }
        }
        rows
    }

    pub fn columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !cols.contains(&e.column.as_str()) {
                cols.push(&e.column);
            }
        }
        cols
    }

    pub fn get(&self, row: &str, column: &str) -> Option<&MetricReport> {
        self.entries
            .iter()
            .find(|e| e.row == row && e.column == column)
            .map(|e| &e.report)
    }

    /// One line per row; cells are `mean ± std` over folds.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let cols = self.columns();
        let mut header = vec!["row".to_string()];
        for c in &cols {
            for m in ABLATION_METRICS {
                header.push(if c.is_empty() { m.to_string() } else { format!("{c} {m}") });
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in self.rows() {
            let mut rec = vec![r.to_string()];
            for c in &cols {
                let summary = self.get(r, c).map(|rep| rep.summary()).unwrap_or_default();
                for m in ABLATION_METRICS {
                    rec.push(summary.get(m).map(|a| a.to_string()).unwrap_or_default());
                }
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Data(format!("writing CSV: {e}")))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let csv_path = stem.with_extension("csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)?;
        let json_path = stem.with_extension("json");
        let entries: Vec<_> = self
            .entries
            .iter()
            .map(|e| serde_json::json!({"row": e.row, "column": e.column, "report": e.report.to_json()}))
            .collect();
        let text = serde_json::to_string_pretty(&serde_json::json!({"grid": self.grid, "entries": entries}))
            .expect("table serializes");
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }
}

/// Cross-validate every variant of `grid` on the same folds.
pub fn run_ablation(
    grid: AblationGrid,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    cases: &[Case],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut entries = Vec::new();
    for v in ablation_variants(grid, &cfg.model)? {
        let run_cfg = TrainConfig {
            model: v.model.clone(),
            ..cfg.clone()
        };
        let dir = out_dir.map(|d| {
            let name = if v.column.is_empty() {
                v.row.clone()
            } else {
                format!("{}_{}", v.row, v.column)
            };
            d.join(name.replace('+', "_"))
        });
        log::info!("ablation {grid}: {} {}", v.row, v.column);
        let runs = cross_validate(&run_cfg, plan, cases, dir.as_deref())?;
        let report = cv_report(&run_cfg, plan, &runs, cases, &grid.to_string())?;
        entries.push(AblationEntry {
            row: v.row,
            column: v.column,
            report,
        });
    }
    Ok(AblationTable { grid, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Task;
    use crate::trainer::split_folds;
    use crate::volumes::{generate_phantom, PhantomSpec};

    #[test]
    fn grid_layouts() {
        let base = ModelConfig::toy(Task::Idh);
        let m = ablation_variants(AblationGrid::Modules, &base).unwrap();
        assert_eq!(m.iter().map(|v| v.row.as_str()).collect::<Vec<_>>(), ["TAFE", "CMD", "DSF"]);
        let d = ablation_variants(AblationGrid::Depth, &base).unwrap();
        assert_eq!(d.len(), 8);
        assert_eq!(d[0].row, "TAFE-1");
        assert_eq!(d[7].row, "SwinT-4");
        assert!(d[..4].iter().all(|v| !v.model.is_unguided()));
        assert!(d[4..].iter().all(|v| v.model.is_unguided()));
        assert_eq!(d[1].model.stages, d[5].model.stages);
        let s = ablation_variants(AblationGrid::Sequences, &base).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s[0].row, "T1+T2");
        assert_eq!(s[0].model.backbone.in_channels, 2);
        assert!(matches!("tables".parse::<AblationGrid>(), Err(Error::Config(_))));
        assert!(matches!(depth_variant("TAFE-7", &base), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_modules_run_fills_table() {
        let spec = |s: u64| PhantomSpec {
            grid: [16, 16, 16],
            core_radius: 2.5,
            rim_thickness: 1.5,
            mismatch: s % 2 == 0,
            ..PhantomSpec::default()
        };
        let cases: Vec<Case> = (0..6).map(|s| generate_phantom(&spec(s), s).unwrap()).collect();
        let mut m = ModelConfig::toy(Task::Idh);
        m.backbone.base_channels = 2;
        m.backbone.input_size = [16, 16, 16];
        m.cmd.channels = 4;
        let cfg = TrainConfig {
            max_epochs: 1,
            folds: 2,
            augment: None,
            ..TrainConfig::new(m)
        };
        let items: Vec<_> = cases.iter().map(|c| (c.case_id.clone(), Task::Idh.class_index(&c.labels))).collect();
        let plan = split_folds(&items, 2, 0).unwrap();
        let table = run_ablation(AblationGrid::Modules, &cfg, &plan, &cases, None).unwrap();
        assert_eq!(table.rows(), ["TAFE", "CMD", "DSF"]);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "row,ACC,F1,MCC,AUC");
        assert_eq!(text.lines().count(), 4);
        assert_eq!(table.get("DSF", "").unwrap().rows.len(), 2);
    }
}
