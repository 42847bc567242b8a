use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::{binary_metrics, dice_region, hausdorff_region, iou_region, report_regions, MetricReport};
use crate::model::Prediction;
use crate::task::Task;
use crate::volumes::Case;

use super::train::{evaluate, seg_argmax, FoldRun, TrainConfig};
use super::FoldPlan;

pub const CLASSIFICATION_COLUMNS: [&str; 6] = ["ACC", "Sens", "Spec", "F1", "MCC", "AUC"];

/// ACC/Sens/Spec/F1/MCC plus AUC and its DeLong interval when both classes
/// are present.
pub fn classification_row(probs: &[f64], labels: &[usize]) -> Result<BTreeMap<String, f64>> {
    let m = binary_metrics(probs, labels)?;
    let mut row = BTreeMap::from([
        ("ACC".to_string(), m.stats.accuracy),
        ("Sens".to_string(), m.stats.sensitivity),
        ("Spec".to_string(), m.stats.specificity),
        ("F1".to_string(), m.stats.f1),
        ("MCC".to_string(), m.stats.mcc),
    ]);
    if let Some(r) = m.roc {
        row.insert("AUC".into(), r.auc);
        row.insert("AUC_low".into(), r.ci_low);
        row.insert("AUC_high".into(), r.ci_high);
    }
    Ok(row)
}

/// Mean Dice, IoU and Hausdorff per subregion over cases. Hausdorff averages
/// only cases where both masks are nonempty in that region.
pub fn segmentation_row(preds: &[crate::volumes::MaskVolume], cases: &[&Case]) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (p, c) in preds.iter().zip(cases) {
        let gt = c
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no mask", c.case_id)))?;
        for region in report_regions(gt) {
            let tag = region.tag();
            let mut add = |k: String, v: f64| {
                let e = sums.entry(k).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            };
            add(format!("{tag}_Dice"), dice_region(p, gt, region)?);
            add(format!("{tag}_IoU"), iou_region(p, gt, region)?);
            match hausdorff_region(p, gt, region, gt.spacing()) {
                Ok(h) => add(format!("{tag}_HD"), h),
                Err(Error::EmptyMask(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Flatten batched predictions into per-case positive probabilities.
pub fn positive_probabilities(preds: &[Prediction], task: Task) -> Vec<f64> {
    preds
        .iter()
        .flat_map(|p| {
            let b = &p.bundles[&task];
            (0..b.batch()).map(move |i| b.positive_probability(i))
        })
        .collect()
}

/// Metrics of one trained model on `cases`.
pub fn model_row(run: &FoldRun, cases: &[&Case], batch_size: usize) -> Result<BTreeMap<String, f64>> {
    let cfg = run.model.config();
    let seg = cfg.task == Task::Segmentation;
    let (_, preds) = evaluate(&run.model, cases, batch_size, seg)?;
    if seg {
        let mut masks = Vec::new();
        let mut i = 0;
        for p in &preds {
            let logits = p.seg_logits.as_ref().expect("decoder ran");
            for b in 0..logits.batch() {
                let gt = cases[i].mask.as_ref().ok_or_else(|| Error::Data("mask missing".into()))?;
                masks.push(seg_argmax(logits, b, gt)?);
                i += 1;
            }
        }
        return segmentation_row(&masks, cases);
    }
    let probs = positive_probabilities(&preds, cfg.task);
    let labels: Vec<usize> = cases
        .iter()
        .map(|c| cfg.task.class_index(&c.labels).unwrap_or(0))
        .collect();
    classification_row(&probs, &labels)
}

/// Validation-fold metrics of each run, one row per fold.
pub fn cv_report(cfg: &TrainConfig, plan: &FoldPlan, runs: &[FoldRun], cases: &[Case], cohort: &str) -> Result<MetricReport> {
    let columns: &[&str] = if cfg.model.task == Task::Segmentation {
        &[]
    } else {
        &CLASSIFICATION_COLUMNS
    };
    let mut report = MetricReport::new(cfg.model.task.name(), cohort, columns);
    for run in runs {
        let ids = plan.validation(run.record.fold);
        let val: Vec<&Case> = ids
            .iter()
            .map(|id| cases.iter().find(|c| &c.case_id == id).expect("plan built from these cases"))
            .collect();
        report.push(format!("fold{}", run.record.fold), model_row(run, &val, cfg.batch_size)?);
    }
    Ok(report)
}
