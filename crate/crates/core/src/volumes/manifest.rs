use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{Labels, Modality};
use crate::error::{Error, Result};
use crate::task::Task;

pub const MANIFEST_HEADER: [&str; 10] = [
    "case_id", "t1", "t1c", "t2", "flair", "mask", "idh", "codel", "grade", "split",
];

/// One manifest row with paths resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub modalities: BTreeMap<Modality, PathBuf>,
    pub mask: Option<PathBuf>,
    pub labels: Labels,
    pub split: String,
    /// 1-based data row number in the source file (header excluded).
    pub row: usize,
}

impl ManifestEntry {
    pub fn has_modality(&self, m: Modality) -> bool {
        self.modalities.contains_key(&m)
    }

    /// Why this case cannot take part in `task`, or `None` if it can.
    pub fn ineligibility(&self, task: Task) -> Option<String> {
        let missing: Vec<String> = task
            .required_modalities()
            .iter()
            .filter(|m| !self.has_modality(**m))
            .map(|m| m.to_string())
            .collect();
        if !missing.is_empty() {
            return Some(format!("missing {}", missing.join(", ")));
        }
        match task {
            Task::Segmentation if self.mask.is_none() => Some("no segmentation mask".into()),
            Task::Segmentation => None,
            _ if task.class_index(&self.labels).is_none() => Some(format!("{task} label unknown")),
            _ => None,
        }
    }

    pub fn eligible(&self, task: Task) -> bool {
        self.ineligibility(task).is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eligible(&self, task: Task) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.eligible(task)).collect()
    }

    pub fn split(&self, tag: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }

    pub fn get(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }
}

fn manifest_err(path: &Path, row: Option<usize>, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Parse and check a manifest CSV. Every referenced file must exist.
pub fn validate_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader
        .headers()
        .map_err(|e| manifest_err(path, None, format!("unreadable header: {e}")))?
        .clone();
    let columns: Vec<&str> = header.iter().collect();
    if columns != MANIFEST_HEADER {
        return Err(manifest_err(
            path,
            None,
            format!("header must be '{}', got '{}'", MANIFEST_HEADER.join(","), columns.join(",")),
        ));
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| manifest_err(path, Some(row), e.to_string()))?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let case_id = cell(0).to_string();
        if case_id.is_empty() {
            return Err(manifest_err(path, Some(row), "empty case_id"));
        }
        if !seen.insert(case_id.clone()) {
            return Err(manifest_err(path, Some(row), format!("duplicate case_id '{case_id}'")));
        }

        let resolve = |rel: &str, what: &str| -> Result<Option<PathBuf>> {
            if rel.is_empty() {
                return Ok(None);
            }
            let p = base.join(rel);
            if !p.is_file() {
                return Err(manifest_err(
                    path,
                    Some(row),
                    format!("{case_id}: {what} file {} does not exist", p.display()),
                ));
            }
            Ok(Some(p))
        };

        let mut modalities = BTreeMap::new();
        for (col, m) in (1..=4).zip(Modality::ALL) {
            if let Some(p) = resolve(cell(col), &m.to_string())? {
                modalities.insert(m, p);
            }
        }
        if modalities.is_empty() {
            return Err(manifest_err(path, Some(row), format!("{case_id}: no modality files")));
        }
        let mask = resolve(cell(5), "mask")?;
        let label_err = |e: Error| manifest_err(path, Some(row), format!("{case_id}: {e}"));
        let labels = Labels {
            idh: cell(6).parse().map_err(label_err)?,
            codel: cell(7).parse().map_err(label_err)?,
            grade: cell(8).parse().map_err(label_err)?,
        };
        entries.push(ManifestEntry {
            case_id,
            modalities,
            mask,
            labels,
            split: cell(9).to_string(),
            row,
        });
    }
    Ok(Manifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Idh;
    use std::io::Write;

    fn touch(dir: &Path, name: &str) {
        fs::File::create(dir.join(name)).unwrap().write_all(b"x").unwrap();
    }

    fn write_manifest(dir: &Path, rows: &[&str]) -> PathBuf {
        let p = dir.join("manifest.csv");
        let mut text = MANIFEST_HEADER.join(",");
        for r in rows {
            text.push('\n');
            text.push_str(r);
        }
        fs::write(&p, text).unwrap();
        p
    }

    fn setup() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for f in ["t1.nii", "t1c.nii", "t2.nii", "flair.nii", "mask.nii"] {
            touch(dir.path(), f);
        }
        dir
    }

    #[test]
    fn parses_well_formed_rows() {
        let dir = setup();
        let p = write_manifest(
            dir.path(),
            &[
                "a,t1.nii,t1c.nii,t2.nii,flair.nii,mask.nii,mutant,intact,LGG,train",
                "b,t1.nii,t1c.nii,t2.nii,flair.nii,,wildtype,,HGG,train",
                "c,,t1c.nii,t2.nii,,,,codeleted,LGG,test",
            ],
        );
        let m = validate_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[2].modalities.len(), 2);
        assert_eq!(m.entries[0].modalities[&Modality::Flair], dir.path().join("flair.nii"));
        assert!(m.entries[2].eligible(Task::Codel));
        assert!(!m.entries[2].eligible(Task::Idh));
        assert_eq!(m.split("test").len(), 1);
    }

    #[test]
    fn missing_file_names_the_row() {
        let dir = setup();
        let p = write_manifest(
            dir.path(),
            &[
                "a,t1.nii,t1c.nii,t2.nii,flair.nii,,mutant,,,train",
                "b,t1.nii,t1c.nii,t2.nii,gone.nii,,mutant,,,train",
            ],
        );
        match validate_manifest(&p).unwrap_err() {
            Error::Manifest { row, message, .. } => {
                assert_eq!(row, Some(2));
                assert!(message.contains("gone.nii"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_ids_and_bad_labels_are_rejected() {
        let dir = setup();
        let p = write_manifest(dir.path(), &["a,t1.nii,,,,,,,,", "a,t1.nii,,,,,,,,"]);
        assert!(matches!(validate_manifest(&p), Err(Error::Manifest { row: Some(2), .. })));
        let p = write_manifest(dir.path(), &["a,t1.nii,,,,,sometimes,,,"]);
        assert!(matches!(validate_manifest(&p), Err(Error::Manifest { row: Some(1), .. })));
    }

    #[test]
    fn unknown_label_is_kept_but_ineligible() {
        let dir = setup();
        let p = write_manifest(
            dir.path(),
            &["a,t1.nii,t1c.nii,t2.nii,flair.nii,mask.nii,unknown,,,train"],
        );
        let m = validate_manifest(&p).unwrap();
        let e = &m.entries[0];
        assert_eq!(e.labels.idh, Idh::Unknown);
        assert!(!e.eligible(Task::Idh));
        assert!(e.eligible(Task::Segmentation));
        assert!(e.ineligibility(Task::Idh).unwrap().contains("unknown"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = setup();
        let p = dir.path().join("m.csv");
        fs::write(&p, "id,t1\na,t1.nii\n").unwrap();
        assert!(matches!(validate_manifest(&p), Err(Error::Manifest { row: None, .. })));
    }
}
