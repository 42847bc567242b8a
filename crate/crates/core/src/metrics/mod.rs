//! Overlap, surface-distance, confusion-table and ROC metrics, plus fold
//! aggregation and report tables.

mod classification;
mod report;

pub use classification::{
    binary_metrics, confusion_counts, confusion_stats, delong_ci, roc_auc, BinaryMetrics, ConfusionCounts,
    ConfusionStats, RocResult,
};
pub use report::{aggregate_folds, Aggregate, MetricReport, ReportRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{MaskVolume, LABEL_ED, LABEL_ET, LABEL_NCR_NET};

/// Voxel selector for overlap metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// Voxels carrying exactly this label.
    Label(u8),
    /// Every nonzero voxel.
    Whole,
}

impl Region {
    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Label(l) => label == l,
            Region::Whole => label > 0,
        }
    }

    /// Column prefix used in reports.
    pub fn tag(self) -> String {
        match self {
            Region::Whole => "WT".into(),
            Region::Label(LABEL_NCR_NET) => "NCR".into(),
            Region::Label(LABEL_ED) => "ED".into(),
            Region::Label(LABEL_ET) => "ET".into(),
            Region::Label(l) => format!("L{l}"),
        }
    }
}

fn check_same_grid(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `(|P∩G|, |P|, |G|)` for one region.
fn overlap_counts(pred: &MaskVolume, gt: &MaskVolume, region: Region) -> Result<(usize, usize, usize)> {
    check_same_grid(pred, gt)?;
    let (mut both, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (ia, ib) = (region.contains(a), region.contains(b));
        p += usize::from(ia);
        g += usize::from(ib);
        both += usize::from(ia && ib);
    }
    Ok((both, p, g))
}

pub fn dice_region(pred: &MaskVolume, gt: &MaskVolume, region: Region) -> Result<f64> {
    let (both, p, g) = overlap_counts(pred, gt, region)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

pub fn iou_region(pred: &MaskVolume, gt: &MaskVolume, region: Region) -> Result<f64> {
    let (both, p, g) = overlap_counts(pred, gt, region)?;
    let union = p + g - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

/// `2|P∩G| / (|P|+|G|)` over voxels equal to `label`; 1 when both are empty.
pub fn dice(pred: &MaskVolume, gt: &MaskVolume, label: u8) -> Result<f64> {
    dice_region(pred, gt, Region::Label(label))
}

/// `|P∩G| / |P∪G|` over voxels equal to `label`; 1 when both are empty.
pub fn iou(pred: &MaskVolume, gt: &MaskVolume, label: u8) -> Result<f64> {
    iou_region(pred, gt, Region::Label(label))
}

/// Voxels of the region with a face neighbour outside it (or on the grid edge).
pub fn boundary_voxels(mask: &MaskVolume, region: Region) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && region.contains(mask.get(z as usize, y as usize, x as usize))
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !region.contains(mask.get(z, y, x)) {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let interior = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    .iter()
                    .all(|&(dz, dy, dx)| inside(zi + dz, yi + dy, xi + dx));
                if !interior {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut worst = 0.0f64;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let mut d2 = 0.0;
            for k in 0..3 {
                let dk = (a[k] as f64 - b[k] as f64) * spacing[k];
                d2 += dk * dk;
            }
            if d2 < best {
                best = d2;
                if best == 0.0 {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Symmetric Hausdorff distance between region boundaries, in the units of
/// `spacing` (axis order matches the voxel index order).
pub fn hausdorff_region(pred: &MaskVolume, gt: &MaskVolume, region: Region, spacing: [f64; 3]) -> Result<f64> {
    check_same_grid(pred, gt)?;
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
    }
    let a = boundary_voxels(pred, region);
    let b = boundary_voxels(gt, region);
    for (name, set) in [("prediction", &a), ("ground truth", &b)] {
        if set.is_empty() {
            return Err(Error::EmptyMask(format!("{name} has no {} voxels", region.tag())));
        }
    }
    Ok(directed(&a, &b, spacing).max(directed(&b, &a, spacing)))
}

/// Whole-tumor Hausdorff distance.
pub fn hausdorff(pred: &MaskVolume, gt: &MaskVolume, spacing: [f64; 3]) -> Result<f64> {
    hausdorff_region(pred, gt, Region::Whole, spacing)
}

/// Regions reported for a mask of the given label set.
pub fn report_regions(mask: &MaskVolume) -> Vec<Region> {
    match mask.label_set() {
        crate::volumes::LabelSet::Binary => vec![Region::Whole],
        crate::volumes::LabelSet::Subregions => vec![
            Region::Whole,
            Region::Label(LABEL_NCR_NET),
            Region::Label(LABEL_ED),
            Region::Label(LABEL_ET),
        ],
    }
}
