//! Synthetic glioma phantoms with a controllable T2–FLAIR mismatch sign.
//!
//! Each phantom is an ellipsoidal "brain" holding a spherical tumor core
//! wrapped in a rim. With the mismatch flag set, the core is bright on T2
//! but suppressed on FLAIR while the FLAIR rim stays hyperintense, and the
//! lesion does not enhance. Without it, FLAIR is homogeneously bright across
//! core and rim and T1C shows an enhancing rim around a necrotic core.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Case, Codel, Grade, Idh, LabelSet, Labels, MaskVolume, Modality, Volume3D};
use super::{LABEL_ED, LABEL_ET, LABEL_NCR_NET};
use crate::error::{Error, Result};

/// Fraction of each half-extent occupied by the brain ellipsoid.
const BRAIN_EXTENT: f64 = 0.85;

/// Labels assigned to mismatch and non-mismatch phantoms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub mismatch: Labels,
    pub no_mismatch: Labels,
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule {
            mismatch: Labels {
                idh: Idh::Mutant,
                codel: Codel::Intact,
                grade: Grade::Lgg,
            },
            no_mismatch: Labels {
                idh: Idh::Wildtype,
                codel: Codel::Intact,
                grade: Grade::Hgg,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    /// Tumor core radius in voxels.
    pub core_radius: f64,
    /// Rim thickness in voxels.
    pub rim_thickness: f64,
    pub mismatch: bool,
    /// Gaussian noise standard deviation (intensity units).
    pub noise_sigma: f64,
    pub label_rule: LabelRule,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: [32, 32, 32],
            core_radius: 4.0,
            rim_thickness: 2.0,
            mismatch: true,
            noise_sigma: 0.1,
            label_rule: LabelRule::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&d| d == 0) {
            return Err(Error::PhantomSpec(format!("grid {:?} has a zero extent", self.grid)));
        }
        if !(self.core_radius > 0.0 && self.core_radius.is_finite()) {
            return Err(Error::PhantomSpec(format!("core radius {} must be positive", self.core_radius)));
        }
        if !(self.rim_thickness >= 0.0 && self.rim_thickness.is_finite()) {
            return Err(Error::PhantomSpec(format!(
                "rim thickness {} must be non-negative",
                self.rim_thickness
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::PhantomSpec(format!("noise sigma {} must be non-negative", self.noise_sigma)));
        }
        let outer = self.core_radius + self.rim_thickness;
        let fits = self
            .grid
            .iter()
            .all(|&d| outer + 1.0 <= BRAIN_EXTENT * d as f64 / 2.0);
        if !fits {
            return Err(Error::PhantomSpec(format!(
                "core radius {} + rim {} does not fit inside grid {:?}",
                self.core_radius, self.rim_thickness, self.grid
            )));
        }
        Ok(())
    }

    pub fn labels(&self) -> Labels {
        if self.mismatch {
            self.label_rule.mismatch
        } else {
            self.label_rule.no_mismatch
        }
    }

    /// Lesion/background contrast unit; grows with noise so the lesion stays
    /// at least three noise sigmas above the surrounding tissue.
    fn contrast(&self) -> f64 {
        1.5 + 3.0 * self.noise_sigma
    }
}

/// Geometry of one generated phantom.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomLayout {
    /// Tumor center in voxel coordinates `(z, y, x)`.
    pub center: [f64; 3],
    pub core_radius: f64,
    pub outer_radius: f64,
    /// Brain ellipsoid semi-axes in voxels.
    pub brain_axes: [f64; 3],
}

impl PhantomLayout {
    fn distance(&self, z: usize, y: usize, x: usize) -> f64 {
        let d = [z as f64 - self.center[0], y as f64 - self.center[1], x as f64 - self.center[2]];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    pub fn in_core(&self, z: usize, y: usize, x: usize) -> bool {
        self.distance(z, y, x) <= self.core_radius
    }

    pub fn in_rim(&self, z: usize, y: usize, x: usize) -> bool {
        let d = self.distance(z, y, x);
        d > self.core_radius && d <= self.outer_radius
    }

    pub fn in_brain(&self, grid: [usize; 3], z: usize, y: usize, x: usize) -> bool {
        let c = [(grid[0] as f64 - 1.0) / 2.0, (grid[1] as f64 - 1.0) / 2.0, (grid[2] as f64 - 1.0) / 2.0];
        let p = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|a| ((p[a] - c[a]) / self.brain_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn draw_layout(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> PhantomLayout {
    let outer = spec.core_radius + spec.rim_thickness;
    let brain_axes = spec.grid.map(|d| BRAIN_EXTENT * d as f64 / 2.0);
    // Keep the whole lesion inside the brain: with per-axis shifts bounded by
    // `slack / sqrt(3)` the lesion's farthest point stays within the ellipsoid.
    let mut center = [0.0; 3];
    for a in 0..3 {
        let mid = (spec.grid[a] as f64 - 1.0) / 2.0;
        let slack = ((brain_axes.iter().cloned().fold(f64::INFINITY, f64::min) - outer - 1.0).max(0.0))
            / 3f64.sqrt();
        center[a] = mid + rng.random_range(-1.0..=1.0) * slack;
    }
    PhantomLayout {
        center,
        core_radius: spec.core_radius,
        outer_radius: outer,
        brain_axes,
    }
}

/// Geometry that [`generate_phantom`] uses for `(spec, seed)`.
pub fn phantom_layout(spec: &PhantomSpec, seed: u64) -> Result<PhantomLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_layout(spec, &mut rng))
}

struct Tissue {
    brain: f64,
    core: f64,
    rim: f64,
}

fn tissue(spec: &PhantomSpec, m: Modality) -> Tissue {
    let c = spec.contrast();
    let brain = 1.0;
    match (m, spec.mismatch) {
        (Modality::T2, _) => Tissue {
            brain,
            core: brain + c,
            rim: brain + 0.8 * c,
        },
        (Modality::Flair, true) => Tissue {
            brain,
            core: brain - 0.2,
            rim: brain + c,
        },
        (Modality::Flair, false) => Tissue {
            brain,
            core: brain + 0.8 * c,
            rim: brain + 0.8 * c,
        },
        (Modality::T1, _) | (Modality::T1c, true) => Tissue {
            brain,
            core: 0.6,
            rim: 0.8,
        },
        (Modality::T1c, false) => Tissue {
            brain,
            core: 0.5,
            rim: brain + c,
        },
    }
}

/// Deterministic phantom for `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Case> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = draw_layout(spec, &mut rng);
    let grid = spec.grid;
    let n: usize = grid.iter().product();
    let spacing = [1.0; 3];

    // Region code per voxel: 0 outside, 1 brain, 2 core, 3 rim.
    let mut region = vec![0u8; n];
    let mut idx = 0;
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                region[idx] = if layout.in_core(z, y, x) {
                    2
                } else if layout.in_rim(z, y, x) {
                    3
                } else if layout.in_brain(grid, z, y, x) {
                    1
                } else {
                    0
                };
                idx += 1;
            }
        }
    }

    let mut volumes = BTreeMap::new();
    for m in Modality::ALL {
        let t = tissue(spec, m);
        let data = region
            .iter()
            .map(|&r| {
                let base = match r {
                    0 => 0.0,
                    1 => t.brain,
                    2 => t.core,
                    _ => t.rim,
                };
                let noise: f64 = StandardNormal.sample(&mut rng);
                base + spec.noise_sigma * noise
            })
            .collect();
        volumes.insert(m, Volume3D::new(grid, spacing, m, data)?);
    }

    let rim_label = if spec.mismatch { LABEL_ED } else { LABEL_ET };
    let labels = region
        .iter()
        .map(|&r| match r {
            2 => LABEL_NCR_NET,
            3 => rim_label,
            _ => 0,
        })
        .collect();
    let mask = MaskVolume::new(grid, spacing, LabelSet::Subregions, labels)?;
    Case::new(format!("phantom-{seed:06}"), volumes, Some(mask), spec.labels())
}
