use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;
use crate::volumes::Manifest;

/// `k` disjoint folds of case ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
    /// Per fold: class index (`None` = unlabeled) → count.
    pub class_counts: Vec<BTreeMap<Option<usize>, usize>>,
    /// Classes too small to stratify.
    pub warnings: Vec<String>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn validation(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Every id outside `fold`, in fold order.
    pub fn training(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Stratified, seeded partition of `(id, class)` items into `k` folds.
///
/// Each class is shuffled and dealt round-robin, continuing from the fold
/// where the previous class stopped, so fold sizes differ by at most one and
/// each class's per-fold count is within one of proportional. Classes with
/// fewer than `k` members are pooled and dealt unstratified.
pub fn split_folds(items: &[(String, Option<usize>)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if items.len() < k {
        return Err(Error::Data(format!("{} cases cannot fill {k} folds", items.len())));
    }
    let mut seen = BTreeSet::new();
    for (id, _) in items {
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("duplicate case id '{id}'")));
        }
    }
    let mut by_class: BTreeMap<Option<usize>, Vec<String>> = BTreeMap::new();
    for (id, c) in items {
        by_class.entry(*c).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut pooled = Vec::new();
    let mut strata = Vec::new();
    for (class, mut ids) in by_class {
        ids.sort();
        if ids.len() < k {
            let msg = format!(
                "class {} has {} members, fewer than {k} folds; not stratified",
                class.map_or("unlabeled".to_string(), |c| c.to_string()),
                ids.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            pooled.extend(ids);
        } else {
            strata.push(ids);
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut ids in strata {
        ids.shuffle(&mut rng);
        for id in ids {
            folds[next].push(id);
            next = (next + 1) % k;
        }
    }
    pooled.sort();
    pooled.shuffle(&mut rng);
    for id in pooled {
        folds[next].push(id);
        next = (next + 1) % k;
    }
    let class_of: BTreeMap<&str, Option<usize>> = items.iter().map(|(id, c)| (id.as_str(), *c)).collect();
    let class_counts = folds
        .iter()
        .map(|f| {
            let mut m = BTreeMap::new();
            for id in f {
                *m.entry(class_of[id.as_str()]).or_insert(0) += 1;
            }
            m
        })
        .collect();
    Ok(FoldPlan {
        folds,
        class_counts,
        warnings,
    })
}

/// Folds over the manifest entries eligible for `task`.
pub fn split_manifest(manifest: &Manifest, task: Task, k: usize, seed: u64) -> Result<FoldPlan> {
    let items: Vec<(String, Option<usize>)> = manifest
        .eligible(task)
        .into_iter()
        .map(|e| (e.case_id.clone(), task.class_index(&e.labels)))
        .collect();
    split_folds(&items, k, seed)
}
