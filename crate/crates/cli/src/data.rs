use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mtsunet::config::RunConfigFile;
use mtsunet::model::{ClassifierMode, ModelConfig};
use mtsunet::volumes::{load_case, validate_manifest, Case, Manifest, ManifestEntry, Modality, PreprocessConfig};
use mtsunet::Task;

use crate::fail::{CliResult, Failure};
use crate::out::require_file;

/// Config file (or built-in defaults) plus `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfigFile> {
    match path {
        Some(p) => {
            require_file(p, "config file")?;
            Ok(RunConfigFile::load(p, overrides)?)
        }
        None => Ok(RunConfigFile::from_overrides(overrides)?),
    }
}

/// `--manifest` if given, else `data.manifest` from the config.
pub fn manifest_path(arg: Option<PathBuf>, cfg: &RunConfigFile) -> CliResult<PathBuf> {
    let p = arg
        .or_else(|| (!cfg.data.manifest.is_empty()).then(|| PathBuf::from(&cfg.data.manifest)))
        .ok_or_else(|| Failure::usage("no manifest: pass --manifest or set data.manifest"))?;
    require_file(&p, "manifest")?;
    Ok(p)
}

/// Every sequence a case must provide for `cfg`.
pub fn needed_modalities(cfg: &ModelConfig) -> Vec<Modality> {
    let mut set: BTreeSet<Modality> = cfg.modalities.iter().copied().collect();
    for t in std::iter::once(cfg.task).chain(cfg.aux_tasks.iter().copied()) {
        set.extend(t.required_modalities().iter().copied());
    }
    if matches!(cfg.head, ClassifierMode::Cmd | ClassifierMode::Dsf) && cfg.task.is_classification() {
        set.extend([Modality::T2, Modality::Flair]);
    }
    set.into_iter().collect()
}

fn entry_ineligibility(e: &ManifestEntry, cfg: &ModelConfig, training: bool) -> Option<String> {
    let missing: Vec<String> = needed_modalities(cfg)
        .into_iter()
        .filter(|m| !e.has_modality(*m))
        .map(|m| m.to_string())
        .collect();
    if !missing.is_empty() {
        return Some(format!("missing {}", missing.join(", ")));
    }
    if let Some(r) = e.ineligibility(cfg.task) {
        return Some(r);
    }
    if training && cfg.task.is_classification() && !cfg.loss.is_unguided() && e.mask.is_none() {
        return Some("no segmentation mask for guided training".into());
    }
    None
}

pub struct Cohort {
    pub manifest: Manifest,
    pub included: Vec<ManifestEntry>,
    pub excluded: Vec<(String, String)>,
}

/// Apply the inclusion rules for `cfg`; excluded cases are logged. Guided
/// training additionally needs masks.
pub fn select_cohort(path: &Path, cfg: &ModelConfig, training: bool) -> CliResult<Cohort> {
    let manifest = validate_manifest(path)?;
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for e in &manifest.entries {
        match entry_ineligibility(e, cfg, training) {
            None => included.push(e.clone()),
            Some(why) => {
                log::warn!("excluding {}: {why}", e.case_id);
                excluded.push((e.case_id.clone(), why));
            }
        }
    }
    Ok(Cohort {
        manifest,
        included,
        excluded,
    })
}

/// Usage error naming why cases were dropped.
pub fn too_few(task: Task, cohort: &Cohort, need: usize) -> Failure {
    let reasons: Vec<String> = cohort
        .excluded
        .iter()
        .take(5)
        .map(|(id, why)| format!("{id} ({why})"))
        .collect();
    let more = cohort.excluded.len().saturating_sub(5);
    Failure::usage(format!(
        "{} of {} cases are eligible for {task}, need at least {need}; inclusion criteria excluded {}{}",
        cohort.included.len(),
        cohort.manifest.len(),
        reasons.join(", "),
        if more > 0 { format!(" and {more} more") } else { String::new() }
    ))
}

pub fn load_cases(entries: &[ManifestEntry], pre: &PreprocessConfig) -> CliResult<Vec<Case>> {
    entries
        .iter()
        .map(|e| load_case(e, pre).map_err(Failure::from))
        .collect()
}
