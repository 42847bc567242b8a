use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::nifti_io::{read_mask, read_volume};
use super::{crop_or_pad, crop_or_pad_mask, znormalize, Case, ManifestEntry};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target: [usize; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target: [96, 96, 96] }
    }
}

/// Read every file of `entry`, check shapes, then z-score and crop/pad.
pub fn load_case(entry: &ManifestEntry, cfg: &PreprocessConfig) -> Result<Case> {
    let mut raw = BTreeMap::new();
    for (&m, path) in &entry.modalities {
        raw.insert(m, read_volume(path, m)?);
    }
    let mask = entry.mask.as_deref().map(read_mask).transpose()?;
    // Shape agreement is checked on the raw grids so the error names the
    // shapes as stored on disk.
    let raw_case = Case::new(entry.case_id.clone(), raw, mask, entry.labels)?;
    if cfg.target.iter().any(|&t| t == 0) {
        return Err(Error::config(format!("crop target {:?} must be positive", cfg.target)));
    }
    let volumes = raw_case
        .volumes()
        .iter()
        .map(|(&m, v)| (m, crop_or_pad(&znormalize(v), cfg.target)))
        .collect();
    let mask = raw_case.mask.as_ref().map(|m| crop_or_pad_mask(m, cfg.target));
    raw_case.with_content(volumes, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::nifti_io::{write_mask, write_volume};
    use crate::volumes::{Labels, MaskVolume, Modality, Volume3D};
    use std::path::Path;

    fn write(dir: &Path, name: &str, m: Modality, dims: [usize; 3]) -> std::path::PathBuf {
        let n: usize = dims.iter().product();
        let v = Volume3D::new(dims, [1.0; 3], m, (0..n).map(|i| (i % 7) as f64).collect()).unwrap();
        let p = dir.join(name);
        write_volume(&p, &v).unwrap();
        p
    }

    fn entry(mods: Vec<(Modality, std::path::PathBuf)>, mask: Option<std::path::PathBuf>) -> ManifestEntry {
        ManifestEntry {
            case_id: "c1".into(),
            modalities: mods.into_iter().collect(),
            mask,
            labels: Labels::default(),
            split: "train".into(),
            row: 1,
        }
    }

    #[test]
    fn loads_and_preprocesses_four_modalities() {
        let dir = tempfile::tempdir().unwrap();
        let mods = Modality::ALL
            .iter()
            .map(|&m| (m, write(dir.path(), &format!("{}.nii.gz", m.name()), m, [8, 10, 12])))
            .collect();
        let mp = dir.path().join("mask.nii.gz");
        write_mask(&mp, &MaskVolume::infer([8, 10, 12], [1.0; 3], vec![1; 960]).unwrap()).unwrap();
        let cfg = PreprocessConfig { target: [16, 16, 16] };
        let case = load_case(&entry(mods, Some(mp)), &cfg).unwrap();
        assert_eq!(case.modalities().len(), 4);
        assert_eq!(case.dims(), [16, 16, 16]);
        assert_eq!(case.mask.as_ref().unwrap().foreground_count(), 960);
    }

    #[test]
    fn two_modality_entry_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mods = vec![
            (Modality::T1c, write(dir.path(), "t1c.nii", Modality::T1c, [4, 4, 4])),
            (Modality::T2, write(dir.path(), "t2.nii", Modality::T2, [4, 4, 4])),
        ];
        let case = load_case(&entry(mods, None), &PreprocessConfig { target: [4, 4, 4] }).unwrap();
        assert_eq!(case.modalities(), vec![Modality::T1c, Modality::T2]);
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let dir = tempfile::tempdir().unwrap();
        let mods = vec![
            (Modality::T2, write(dir.path(), "t2.nii", Modality::T2, [4, 4, 4])),
            (Modality::Flair, write(dir.path(), "fl.nii", Modality::Flair, [4, 4, 5])),
        ];
        let err = load_case(&entry(mods, None), &PreprocessConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Case(_)));
        assert!(msg.contains("[4, 4, 4]") && msg.contains("[4, 4, 5]"), "{msg}");
    }
}
