use log::warn;

use super::{MaskVolume, Volume3D};

/// Standard deviations at or below this are treated as constant volumes.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Z-score standardization over the full grid. A constant volume (for
/// example an absent modality filled with zeros) maps to all zeros.
pub fn znormalize(v: &Volume3D) -> Volume3D {
    let mean = v.mean();
    let std = v.std();
    if std <= ZSCORE_EPS {
        warn!(
            "{} volume is constant (std {std:e}); normalizing to zeros",
            v.modality()
        );
        return v.with_data(vec![0.0; v.len()], v.dims());
    }
    v.with_data(v.data().iter().map(|x| (x - mean) / std).collect(), v.dims())
}

/// Offset that maps an output index to an input index for a centered
/// crop (positive) or pad (negative).
fn center_offset(input: usize, target: usize) -> isize {
    if input >= target {
        ((input - target) / 2) as isize
    } else {
        -(((target - input) / 2) as isize)
    }
}

fn crop_or_pad_grid<T: Copy>(data: &[T], dims: [usize; 3], target: [usize; 3], fill: T) -> Vec<T> {
    let off: Vec<isize> = (0..3).map(|a| center_offset(dims[a], target[a])).collect();
    let mut out = vec![fill; target.iter().product()];
    for z in 0..target[0] {
        let iz = z as isize + off[0];
        if iz < 0 || iz >= dims[0] as isize {
            continue;
        }
        for y in 0..target[1] {
            let iy = y as isize + off[1];
            if iy < 0 || iy >= dims[1] as isize {
                continue;
            }
            let x_lo = (-off[2]).max(0) as usize;
            let x_hi = ((dims[2] as isize - off[2]).min(target[2] as isize)).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            let src = (iz as usize * dims[1] + iy as usize) * dims[2];
            let dst = (z * target[1] + y) * target[2];
            let ix0 = (x_lo as isize + off[2]) as usize;
            out[dst + x_lo..dst + x_hi].copy_from_slice(&data[src + ix0..src + ix0 + (x_hi - x_lo)]);
        }
    }
    out
}

/// Center-aligned crop and/or zero pad to exactly `target`.
pub fn crop_or_pad(v: &Volume3D, target: [usize; 3]) -> Volume3D {
    assert!(target.iter().all(|&t| t > 0), "crop target must be positive");
    v.with_data(crop_or_pad_grid(v.data(), v.dims(), target, 0.0), target)
}

/// Same geometry as [`crop_or_pad`], background label fill.
pub fn crop_or_pad_mask(m: &MaskVolume, target: [usize; 3]) -> MaskVolume {
    assert!(target.iter().all(|&t| t > 0), "crop target must be positive");
    m.with_labels(crop_or_pad_grid(m.labels(), m.dims(), target, 0), target)
}
