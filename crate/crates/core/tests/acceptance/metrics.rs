//! Criteria 1-3: metric oracles, the Dice/IoU identity and DeLong variance.

use std::time::{Duration, Instant};

use mtsunet::metrics::{
    confusion_counts, confusion_stats, delong_ci, dice_region, hausdorff_region, iou_region, roc_auc, ConfusionCounts,
    Region,
};
use mtsunet::volumes::MaskVolume;
use mtsunet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::verdict;

const METRIC_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-9;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const PAIRS: usize = 500;
const SCORE_SETS: usize = 500;
/// Allowed relative deviation of the variance ratio from 4.
const QUADRUPLE_SLACK: f64 = 0.15;

const REGIONS: [Region; 4] = [Region::Whole, Region::Label(1), Region::Label(2), Region::Label(3)];

fn random_pair(rng: &mut ChaCha8Rng) -> (MaskVolume, MaskVolume, [f64; 3]) {
    let dims = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)];
    let spacing = [0, 1, 2].map(|_| rng.random_range(1..=5) as f64 * 0.5);
    let n = dims.iter().product();
    let density = rng.random_range(0.05..0.8);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        (0..n)
            .map(|_| if rng.random_bool(density) { rng.random_range(1..=3) } else { 0 })
            .collect()
    };
    let a = draw(rng);
    let b = draw(rng);
    (
        MaskVolume::infer(dims, spacing, a).unwrap(),
        MaskVolume::infer(dims, spacing, b).unwrap(),
        spacing,
    )
}

fn in_region(r: Region, l: u8) -> bool {
    match r {
        Region::Whole => l != 0,
        Region::Label(k) => l == k,
    }
}

/// Exhaustive voxel counts: `(|P∩G|, |P|, |G|)`.
fn oracle_counts(p: &MaskVolume, g: &MaskVolume, r: Region) -> (f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0);
    for i in 0..p.labels().len() {
        let (a, b) = (in_region(r, p.labels()[i]), in_region(r, g.labels()[i]));
        if a && b {
            c.0 += 1.0;
        }
        if a {
            c.1 += 1.0;
        }
        if b {
            c.2 += 1.0;
        }
    }
    c
}

fn oracle_dice(p: &MaskVolume, g: &MaskVolume, r: Region) -> f64 {
    let (i, a, b) = oracle_counts(p, g, r);
    if a + b == 0.0 {
        1.0
    } else {
        2.0 * i / (a + b)
    }
}

fn oracle_iou(p: &MaskVolume, g: &MaskVolume, r: Region) -> f64 {
    let (i, a, b) = oracle_counts(p, g, r);
    if a + b - i == 0.0 {
        1.0
    } else {
        i / (a + b - i)
    }
}

/// Surface voxels: in the region with fewer than six in-region face
/// neighbours inside the grid.
fn oracle_surface(m: &MaskVolume, r: Region) -> Vec<[i64; 3]> {
    let d = m.dims().map(|v| v as i64);
    let lab = |z: i64, y: i64, x: i64| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d[0] || y >= d[1] || x >= d[2] {
            return false;
        }
        in_region(r, m.labels()[((z * d[1] + y) * d[2] + x) as usize])
    };
    let mut out = Vec::new();
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                if !lab(z, y, x) {
                    continue;
                }
                let n = [lab(z - 1, y, x), lab(z + 1, y, x), lab(z, y - 1, x), lab(z, y + 1, x), lab(z, y, x - 1), lab(z, y, x + 1)]
                    .iter()
                    .filter(|&&v| v)
                    .count();
                if n < 6 {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// All pairwise distances, then max over each side of the per-point minimum.
fn oracle_hausdorff(p: &MaskVolume, g: &MaskVolume, r: Region, s: [f64; 3]) -> Option<f64> {
    let a = oracle_surface(p, r);
    let b = oracle_surface(g, r);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let dist = |u: &[i64; 3], v: &[i64; 3]| {
        (0..3)
            .map(|k| ((u[k] - v[k]) as f64 * s[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let matrix: Vec<Vec<f64>> = a.iter().map(|u| b.iter().map(|v| dist(u, v)).collect()).collect();
    let ab = matrix
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    let ba = (0..b.len())
        .map(|j| matrix.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    Some(ab.max(ba))
}

/// Exhaustive pair counting with ties worth one half.
fn oracle_auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn safe_div(n: f64, d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        n / d
    }
}

/// `[accuracy, sensitivity, specificity, f1, mcc]` by tallying every case.
fn oracle_rates(pred: &[usize], truth: &[usize]) -> [f64; 5] {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 0) => tn += 1.0,
            _ => fn_ += 1.0,
        }
    }
    let precision = safe_div(tp, tp + fp);
    let recall = safe_div(tp, tp + fn_);
    let mcc_den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    [
        (tp + tn) / pred.len() as f64,
        recall,
        safe_div(tn, tn + fp),
        safe_div(2.0 * precision * recall, precision + recall),
        safe_div(tp * tn - fp * fn_, mcc_den.sqrt()),
    ]
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let n = rng.random_range(1..=40);
    let coarse = rng.random_bool(0.5);
    let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(0.5))).collect();
    let scores = labels
        .iter()
        .map(|&l| {
            let s: f64 = rng.random_range(0.0..1.0) + 0.3 * l as f64;
            if coarse {
                (s * 5.0).round() / 5.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}

#[test]
fn criterion_01_metric_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut mismatches = Vec::new();
    let mut hd_checked = 0;
    for k in 0..PAIRS {
        let (p, g, s) = random_pair(&mut rng);
        for r in REGIONS {
            worst = worst.max((dice_region(&p, &g, r).unwrap() - oracle_dice(&p, &g, r)).abs());
            worst = worst.max((iou_region(&p, &g, r).unwrap() - oracle_iou(&p, &g, r)).abs());
            match (hausdorff_region(&p, &g, r, s), oracle_hausdorff(&p, &g, r, s)) {
                (Ok(h), Some(o)) => {
                    worst = worst.max((h - o).abs());
                    hd_checked += 1;
                }
                (Err(Error::EmptyMask(_)), None) => {}
                (got, want) => mismatches.push(format!("pair {k} {r:?}: hausdorff {got:?} vs oracle {want:?}")),
            }
        }
    }
    let mut auc_checked = 0;
    for k in 0..SCORE_SETS {
        let (scores, labels) = random_scores(&mut rng);
        match (roc_auc(&scores, &labels), oracle_auc(&scores, &labels)) {
            (Ok(a), Some(o)) => {
                worst = worst.max((a - o).abs());
                auc_checked += 1;
            }
            (Err(Error::Degenerate(_)), None) => {}
            (got, want) => mismatches.push(format!("set {k}: auc {got:?} vs oracle {want:?}")),
        }
        let pred: Vec<usize> = scores.iter().map(|&s| usize::from(s > 0.6)).collect();
        let stats = confusion_stats(confusion_counts(&pred, &labels).unwrap()).unwrap();
        let want = oracle_rates(&pred, &labels);
        let got = [stats.accuracy, stats.sensitivity, stats.specificity, stats.f1, stats.mcc];
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    let empty = confusion_stats(ConfusionCounts::default());
    if !matches!(empty, Err(Error::Degenerate(_))) {
        mismatches.push(format!("empty confusion table gave {empty:?}"));
    }
    let elapsed = t0.elapsed();
    let ok = worst <= METRIC_TOL && mismatches.is_empty() && elapsed < ORACLE_BUDGET;
    verdict(
        1,
        ok,
        format!(
            "{PAIRS} mask pairs ({hd_checked} Hausdorff comparisons), {SCORE_SETS} score sets ({auc_checked} AUCs); \
             max deviation {worst:.1e} (tol {METRIC_TOL:.0e}); {} mismatches; {elapsed:.1?}",
            mismatches.len()
        ),
    );
}

#[test]
fn criterion_02_dice_iou_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..PAIRS {
        let (p, g, _) = random_pair(&mut rng);
        for r in REGIONS {
            let d = dice_region(&p, &g, r).unwrap();
            let j = iou_region(&p, &g, r).unwrap();
            worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
        }
    }
    verdict(
        2,
        worst <= IDENTITY_TOL,
        format!("max |Dice - 2 IoU/(1+IoU)| = {worst:.1e} over {PAIRS} pairs x 4 regions (tol {IDENTITY_TOL:.0e})"),
    );
}

#[test]
fn criterion_03_delong() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut auc_exact = true;
    for _ in 0..SCORE_SETS {
        let (scores, labels) = random_scores(&mut rng);
        if let (Ok(a), Ok(r)) = (roc_auc(&scores, &labels), delong_ci(&scores, &labels, 0.95)) {
            auc_exact &= a.to_bits() == r.auc.to_bits();
        }
    }

    let sep = delong_ci(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &[1, 1, 1, 0, 0, 0], 0.95).unwrap();
    let perfect_zero = sep.delong_variance == 0.0 && sep.auc == 1.0;

    let n = 60;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| rng.random_range(0.0..1.0) + 0.4 * l as f64)
        .collect();
    let base = delong_ci(&scores, &labels, 0.95).unwrap();
    let rep = |v: &[f64]| v.iter().flat_map(|&x| [x; 4]).collect::<Vec<f64>>();
    let labels4: Vec<usize> = labels.iter().flat_map(|&l| [l; 4]).collect();
    let big = delong_ci(&rep(&scores), &labels4, 0.95).unwrap();
    let ratio = base.delong_variance / big.delong_variance;
    let ratio_ok = (ratio - 4.0).abs() <= 4.0 * QUADRUPLE_SLACK && big.auc == base.auc;

    verdict(
        3,
        auc_exact && perfect_zero && ratio_ok,
        format!(
            "AUC bit-identical: {auc_exact}; separated variance {:e}; variance ratio on x4 data {ratio:.3} \
             (want 4 +/- {:.0}%)",
            sep.delong_variance,
            QUADRUPLE_SLACK * 100.0
        ),
    );
}
