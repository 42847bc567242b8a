use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{voxel_index, Case, MaskVolume, Volume3D};

/// Online augmentation ranges. Rotation and elastic deformation are each
/// applied with their own probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub rotate_p: f64,
    pub max_rotation_deg: f64,
    pub intensity_range: [f64; 2],
    pub elastic_p: f64,
    pub elastic_sigma: f64,
    pub elastic_magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            rotate_p: 0.5,
            max_rotation_deg: 15.0,
            intensity_range: [0.9, 1.1],
            elastic_p: 0.5,
            elastic_sigma: 4.0,
            elastic_magnitude: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_p", self.flip_p), ("rotate_p", self.rotate_p), ("elastic_p", self.elastic_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{name} must lie in [0, 1], got {p}")));
            }
        }
        let [lo, hi] = self.intensity_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(format!("augment.intensity_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if self.max_rotation_deg < 0.0 || self.elastic_sigma <= 0.0 || self.elastic_magnitude < 0.0 {
            return Err(Error::config("augment rotation, sigma and magnitude must be non-negative (sigma positive)"));
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Rebuild a case on grid `dims` where output voxel `p` takes input voxel `src(p)`.
fn remap_exact(case: &Case, dims: [usize; 3], src: impl Fn([usize; 3]) -> [usize; 3]) -> Result<Case> {
    let old = case.dims();
    let n: usize = dims.iter().product();
    let mut index = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let [a, b, c] = src([z, y, x]);
                index.push(voxel_index(old, a, b, c));
            }
        }
    }
    let volumes = case
        .volumes()
        .iter()
        .map(|(&m, v)| {
            let data = index.iter().map(|&i| v.data()[i]).collect();
            Ok((m, Volume3D::new(dims, v.spacing(), m, data)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mask = match &case.mask {
        Some(mk) => Some(MaskVolume::new(
            dims,
            mk.spacing(),
            mk.label_set(),
            index.iter().map(|&i| mk.labels()[i]).collect(),
        )?),
        None => None,
    };
    case.with_content(volumes, mask)
}

/// Mirror along `axis` (0 = z, 1 = y, 2 = x).
pub fn flip(case: &Case, axis: usize) -> Result<Case> {
    if axis > 2 {
        return Err(Error::config(format!("flip axis {axis} outside 0..=2")));
    }
    let dims = case.dims();
    remap_exact(case, dims, |mut p| {
        p[axis] = dims[axis] - 1 - p[axis];
        p
    })
}

/// Quarter turn in the plane of axes `(a, b)`; the grid must be square there.
pub fn rot90(case: &Case, a: usize, b: usize) -> Result<Case> {
    let dims = case.dims();
    if a > 2 || b > 2 || a == b {
        return Err(Error::config(format!("rotation plane ({a}, {b}) is not a pair of distinct axes")));
    }
    if dims[a] != dims[b] {
        return Err(Error::shape(format!("rot90 needs a square plane, got {} x {}", dims[a], dims[b])));
    }
    remap_exact(case, dims, |p| {
        let mut q = p;
        q[a] = p[b];
        q[b] = dims[a] - 1 - p[a];
        q
    })
}

/// Multiply each modality by `factor`; the mask is untouched.
pub fn scale_intensity(case: &Case, factor: f64) -> Result<Case> {
    let volumes = case
        .volumes()
        .iter()
        .map(|(&m, v)| Ok((m, Volume3D::new(v.dims(), v.spacing(), m, v.data().iter().map(|x| x * factor).collect())?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    case.with_content(volumes, case.mask.clone())
}

fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        r
    };
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (axis, &t) in angles.iter().enumerate() {
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        r[i][i] = t.cos();
        r[i][j] = -t.sin();
        r[j][i] = t.sin();
        r[j][j] = t.cos();
        m = mul(r, m);
    }
    m
}

fn gaussian_smooth(field: &mut [f64], dims: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut tmp = vec![0.0; field.len()];
    for axis in 0..3 {
        let len = dims[axis] as isize;
        for (idx, out) in tmp.iter_mut().enumerate() {
            let pos = (idx / strides[axis]) % dims[axis];
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, w) in kernel.iter().enumerate() {
                let q = pos as isize + k as isize - radius;
                if q < 0 || q >= len {
                    continue;
                }
                let j = (idx as isize + (q - pos as isize) * strides[axis] as isize) as usize;
                acc += w * field[j];
                wsum += w;
            }
            *out = acc / wsum;
        }
        field.copy_from_slice(&tmp);
    }
}

/// Resample every volume trilinearly (edge-clamped) and the mask by nearest
/// neighbour at `src(p)` for each output voxel `p`.
fn resample(case: &Case, src: &[[f64; 3]]) -> Result<Case> {
    let dims = case.dims();
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let mut corners = Vec::with_capacity(src.len());
    let mut nearest = Vec::with_capacity(src.len());
    for s in src {
        let c = [clamp(s[0], dims[0]), clamp(s[1], dims[1]), clamp(s[2], dims[2])];
        let lo = [c[0].floor() as usize, c[1].floor() as usize, c[2].floor() as usize];
        let hi = [
            (lo[0] + 1).min(dims[0] - 1),
            (lo[1] + 1).min(dims[1] - 1),
            (lo[2] + 1).min(dims[2] - 1),
        ];
        let f = [c[0] - lo[0] as f64, c[1] - lo[1] as f64, c[2] - lo[2] as f64];
        let mut taps = [(0usize, 0.0f64); 8];
        for (t, tap) in taps.iter_mut().enumerate() {
            let pick = |axis: usize| if t >> (2 - axis) & 1 == 1 { (hi[axis], f[axis]) } else { (lo[axis], 1.0 - f[axis]) };
            let (z, wz) = pick(0);
            let (y, wy) = pick(1);
            let (x, wx) = pick(2);
            *tap = (voxel_index(dims, z, y, x), wz * wy * wx);
        }
        corners.push(taps);
        nearest.push(voxel_index(
            dims,
            c[0].round() as usize,
            c[1].round() as usize,
            c[2].round() as usize,
        ));
    }
    let volumes = case
        .volumes()
        .iter()
        .map(|(&m, v)| {
            let d = v.data();
            let data = corners.iter().map(|taps| taps.iter().map(|&(i, w)| w * d[i]).sum()).collect();
            Ok((m, Volume3D::new(dims, v.spacing(), m, data)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mask = match &case.mask {
        Some(mk) => Some(MaskVolume::new(
            dims,
            mk.spacing(),
            mk.label_set(),
            nearest.iter().map(|&i| mk.labels()[i]).collect(),
        )?),
        None => None,
    };
    case.with_content(volumes, mask)
}

/// Random flips, rotation, elastic deformation and intensity scaling, drawn
/// from a generator seeded by `(case_id, seed)`. Labels are never modified.
pub fn augment(case: &Case, seed: u64, cfg: &AugmentConfig) -> Result<Case> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&case.case_id));
    let dims = case.dims();
    let rotate = rng.random::<f64>() < cfg.rotate_p && cfg.max_rotation_deg > 0.0;
    let elastic = rng.random::<f64>() < cfg.elastic_p && cfg.elastic_magnitude > 0.0;
    let angles = [0; 3].map(|_| (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_rotation_deg.to_radians());
    let mut out = case.clone();
    if rotate || elastic {
        let n: usize = dims.iter().product();
        let r = rotation_matrix(if rotate { angles } else { [0.0; 3] });
        let mut disp = vec![vec![0.0; n]; 3];
        if elastic {
            for comp in disp.iter_mut() {
                comp.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                gaussian_smooth(comp, dims, cfg.elastic_sigma);
            }
            let peak = disp.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                let s = cfg.elastic_magnitude / peak;
                disp.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let mut src = Vec::with_capacity(n);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = voxel_index(dims, z, y, x);
                    let p = [z as f64 - center[0], y as f64 - center[1], x as f64 - center[2]];
                    let mut s = [0.0; 3];
                    for a in 0..3 {
                        s[a] = (0..3).map(|b| r[a][b] * p[b]).sum::<f64>() + center[a] + disp[a][i];
                    }
                    src.push(s);
                }
            }
        }
        out = resample(&out, &src)?;
    }
    for axis in 0..3 {
        if rng.random::<f64>() < cfg.flip_p {
            out = flip(&out, axis)?;
        }
    }
    let [lo, hi] = cfg.intensity_range;
    let volumes = out
        .volumes()
        .iter()
        .map(|(&m, v)| {
            let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            Ok((m, Volume3D::new(v.dims(), v.spacing(), m, v.data().iter().map(|x| x * f).collect())?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    out.with_content(volumes, out.mask.clone())
}
