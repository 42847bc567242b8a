//! Volumetric data model, manifest ingestion, preprocessing and synthetic
//! phantoms.

mod loader;
mod manifest;
pub mod nifti_io;
mod phantom;
mod preprocess;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loader::{load_case, PreprocessConfig};
pub use manifest::{validate_manifest, Manifest, ManifestEntry, MANIFEST_HEADER};
pub use phantom::{generate_phantom, phantom_layout, LabelRule, PhantomLayout, PhantomSpec};
pub use preprocess::{crop_or_pad, crop_or_pad_mask, znormalize, ZSCORE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1c,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1c, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::T1 => "T1",
            Modality::T1c => "T1C",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t1" => Ok(Modality::T1),
            "t1c" | "t1ce" | "t1gd" => Ok(Modality::T1c),
            "t2" => Ok(Modality::T2),
            "flair" => Ok(Modality::Flair),
            other => Err(Error::config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Flat index of `(z, y, x)` in a row-major grid.
#[inline]
pub fn voxel_index(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("volume dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::shape(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    let n: usize = dims.iter().product();
    if n != len {
        return Err(Error::shape(format!("dims {dims:?} need {n} voxels, got {len}")));
    }
    Ok(())
}

/// One scalar MR volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    modality: Modality,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], modality: Modality, data: Vec<f64>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        Ok(Volume3D {
            dims,
            spacing,
            modality,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], modality: Modality, value: f64) -> Result<Self> {
        Self::new(dims, spacing, modality, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[voxel_index(self.dims, z, y, x)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub(crate) fn with_data(&self, data: Vec<f64>, dims: [usize; 3]) -> Volume3D {
        Volume3D {
            dims,
            spacing: self.spacing,
            modality: self.modality,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSet {
    /// `{0, 1}` whole-tumor masks.
    Binary,
    /// `{0 = background, 1 = NCR/NET, 2 = ED, 3 = ET}`.
    Subregions,
}

impl LabelSet {
    pub fn max_label(self) -> u8 {
        match self {
            LabelSet::Binary => 1,
            LabelSet::Subregions => 3,
        }
    }
}

pub const LABEL_NCR_NET: u8 = 1;
pub const LABEL_ED: u8 = 2;
pub const LABEL_ET: u8 = 3;

/// Integer segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    label_set: LabelSet,
    labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], label_set: LabelSet, labels: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l > label_set.max_label()) {
            return Err(Error::Label(format!(
                "label {bad} outside the {label_set:?} label set"
            )));
        }
        Ok(MaskVolume {
            dims,
            spacing,
            label_set,
            labels,
        })
    }

    /// Mask from raw labels, picking the narrowest label set that fits.
    pub fn infer(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        let set = if labels.iter().all(|&l| l <= 1) {
            LabelSet::Binary
        } else {
            LabelSet::Subregions
        };
        Self::new(dims, spacing, set, labels)
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3], label_set: LabelSet) -> Result<Self> {
        Self::new(dims, spacing, label_set, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn label_set(&self) -> LabelSet {
        self.label_set
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[voxel_index(self.dims, z, y, x)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// Whole-tumor mask: every nonzero label becomes 1.
    pub fn to_binary(&self) -> MaskVolume {
        MaskVolume {
            dims: self.dims,
            spacing: self.spacing,
            label_set: LabelSet::Binary,
            labels: self.labels.iter().map(|&l| u8::from(l > 0)).collect(),
        }
    }

    pub(crate) fn with_labels(&self, labels: Vec<u8>, dims: [usize; 3]) -> MaskVolume {
        MaskVolume {
            dims,
            spacing: self.spacing,
            label_set: self.label_set,
            labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Idh {
    Mutant,
    Wildtype,
    #[default]
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Codel {
    Codeleted,
    Intact,
    #[default]
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Grade {
    #[serde(rename = "LGG")]
    Lgg,
    #[serde(rename = "HGG")]
    Hgg,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

macro_rules! label_text {
    ($ty:ty, $($variant:path => $text:literal),+ ; $($alias:literal => $avariant:path),*) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $text),+ }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let t = s.trim();
                $(if t.eq_ignore_ascii_case($text) { return Ok($variant); })+
                $(if t.eq_ignore_ascii_case($alias) { return Ok($avariant); })*
                Err(Error::Label(format!("unparseable {} label '{}'", stringify!($ty), s)))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

label_text!(Idh, Idh::Mutant => "mutant", Idh::Wildtype => "wildtype", Idh::Unknown => "unknown";
    "" => Idh::Unknown, "wild-type" => Idh::Wildtype, "wt" => Idh::Wildtype);
label_text!(Codel, Codel::Codeleted => "codeleted", Codel::Intact => "intact", Codel::Unknown => "unknown";
    "" => Codel::Unknown, "non-codeleted" => Codel::Intact);
label_text!(Grade, Grade::Lgg => "LGG", Grade::Hgg => "HGG", Grade::Unknown => "unknown";
    "" => Grade::Unknown);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Labels {
    pub idh: Idh,
    pub codel: Codel,
    pub grade: Grade,
}

/// One patient: aligned modality volumes, optional mask and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    volumes: BTreeMap<Modality, Volume3D>,
    pub mask: Option<MaskVolume>,
    pub labels: Labels,
}

impl Case {
    pub fn new(
        case_id: impl Into<String>,
        volumes: BTreeMap<Modality, Volume3D>,
        mask: Option<MaskVolume>,
        labels: Labels,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let mut iter = volumes.values();
        let first = iter
            .next()
            .ok_or_else(|| Error::Case(format!("{case_id}: at least one modality is required")))?;
        for v in iter {
            if v.dims() != first.dims() {
                return Err(Error::Case(format!(
                    "{case_id}: {} shape {:?} differs from {} shape {:?}",
                    v.modality(),
                    v.dims(),
                    first.modality(),
                    first.dims()
                )));
            }
            if !spacing_close(v.spacing(), first.spacing()) {
                return Err(Error::Case(format!(
                    "{case_id}: {} spacing {:?} differs from {} spacing {:?}",
                    v.modality(),
                    v.spacing(),
                    first.modality(),
                    first.spacing()
                )));
            }
        }
        for (m, v) in &volumes {
            if *m != v.modality() {
                return Err(Error::Case(format!("{case_id}: volume keyed {m} is tagged {}", v.modality())));
            }
        }
        if let Some(mask) = &mask {
            if mask.dims() != first.dims() {
                return Err(Error::Case(format!(
                    "{case_id}: mask shape {:?} differs from volume shape {:?}",
                    mask.dims(),
                    first.dims()
                )));
            }
        }
        Ok(Case {
            case_id,
            volumes,
            mask,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volumes.values().next().expect("nonempty").dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.volumes.values().next().expect("nonempty").spacing()
    }

    pub fn volume(&self, m: Modality) -> Option<&Volume3D> {
        self.volumes.get(&m)
    }

    pub fn volumes(&self) -> &BTreeMap<Modality, Volume3D> {
        &self.volumes
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.volumes.keys().copied().collect()
    }

    pub fn has_modality(&self, m: Modality) -> bool {
        self.volumes.contains_key(&m)
    }

    /// Replace all volumes and the mask in one step, re-validating shapes.
    pub fn with_content(&self, volumes: BTreeMap<Modality, Volume3D>, mask: Option<MaskVolume>) -> Result<Case> {
        Case::new(self.case_id.clone(), volumes, mask, self.labels)
    }
}

fn spacing_close(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0))
}
