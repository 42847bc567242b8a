//! Occlusion-sensitivity and Grad-CAM heatmaps, with NIfTI and PNG output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::STAGES;
use crate::error::{Error, Result};
use crate::graph::{gap, Graph};
use crate::model::{InputVars, ModelInput, MtsUnet};
use crate::task::Task;
use crate::volumes::nifti_io::write_grid;
use crate::volumes::{voxel_index, Case, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Occlusion,
    Gradcam,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "occlusion" => Ok(Method::Occlusion),
            "gradcam" | "grad-cam" => Ok(Method::Gradcam),
            other => Err(Error::config(format!("unknown explanation method '{other}' (occlusion, gradcam)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Occlusion => "occlusion",
            Method::Gradcam => "gradcam",
        })
    }
}

/// Activation tensor a Grad-CAM map is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    /// Encoder stage output `x₁..x₄`.
    Stage(usize),
    /// Attention-augmented CMD features of the T2 stream.
    CmdT2,
    /// Attention-augmented CMD features of the FLAIR stream.
    CmdFlair,
}

impl Default for Layer {
    fn default() -> Self {
        Layer::Stage(STAGES)
    }
}

impl FromStr for Layer {
    type Err = Error;

    /// `x1`..`x4`, `cmd.t2` or `cmd.flair`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "cmd.t2" => return Ok(Layer::CmdT2),
            "cmd.flair" => return Ok(Layer::CmdFlair),
            _ => {}
        }
        match t.strip_prefix('x').and_then(|n| n.parse::<usize>().ok()) {
            Some(n) if (1..=STAGES).contains(&n) => Ok(Layer::Stage(n)),
            _ => Err(Error::config(format!("unknown layer '{s}' (x1..x4, cmd.t2, cmd.flair)"))),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Stage(n) => write!(f, "x{n}"),
            Layer::CmdT2 => f.write_str("cmd.t2"),
            Layer::CmdFlair => f.write_str("cmd.flair"),
        }
    }
}

/// Attribution values on the input voxel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
    pub task: Task,
    pub target_class: usize,
    pub method: Method,
    pub layer: Option<Layer>,
    /// Occluded forward passes evaluated; 0 for Grad-CAM.
    pub evaluations: usize,
}

impl Heatmap {
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.values[voxel_index(self.dims, z, y, x)]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rounded centroid of the voxels attaining the maximum.
    pub fn peak(&self) -> [usize; 3] {
        let m = self.max();
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for z in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[2] {
                    if self.get(z, y, x) == m {
                        sum[0] += z as f64;
                        sum[1] += y as f64;
                        sum[2] += x as f64;
                        n += 1.0;
                    }
                }
            }
        }
        sum.map(|s| (s / n).round() as usize)
    }

    /// Mean over voxels where `select` holds; `None` if it never does.
    pub fn masked_mean(&self, select: impl Fn(usize) -> bool) -> Option<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for (i, v) in self.values.iter().enumerate() {
            if select(i) {
                s += v;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub fill: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            patch: [16; 3],
            stride: [8; 3],
            fill: 0.0,
        }
    }
}

fn task_probability(model: &MtsUnet, case: &Case, task: Task, class: usize) -> Result<f64> {
    let input = ModelInput::from_cases(&[case], model.config())?;
    let pred = model.predict(&input, false)?;
    let b = pred
        .bundles
        .get(&task)
        .ok_or_else(|| Error::config(format!("model has no {task} head")))?;
    Ok(b.probabilities.data()[class])
}

fn check_target(model: &MtsUnet, task: Task, class: usize) -> Result<()> {
    if !model.config().classification_tasks().contains(&task) {
        return Err(Error::config(format!("model has no {task} head")));
    }
    if class > 1 {
        return Err(Error::config(format!("target class {class} outside 0..=1")));
    }
    Ok(())
}

/// Window start offsets along one axis: `0, s, 2s, …` below `len`.
fn starts(len: usize, stride: usize) -> Vec<usize> {
    (0..len).step_by(stride).collect()
}

/// Index of the window whose (clipped) center is nearest to each voxel.
fn nearest_window(len: usize, patch: usize, st: &[usize]) -> Vec<usize> {
    let centers: Vec<f64> = st
        .iter()
        .map(|&s| (s as f64 + (s + patch).min(len) as f64 - 1.0) / 2.0)
        .collect();
    (0..len)
        .map(|v| {
            let mut best = 0;
            for (i, c) in centers.iter().enumerate() {
                if (c - v as f64).abs() < (centers[best] - v as f64).abs() {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Drop in the target-class probability when each patch is replaced by
/// `fill` in every modality.
pub fn occlusion_map(model: &MtsUnet, case: &Case, task: Task, target_class: usize, cfg: &OcclusionConfig) -> Result<Heatmap> {
    check_target(model, task, target_class)?;
    let dims = case.dims();
    for a in 0..3 {
        if cfg.patch[a] == 0 || cfg.stride[a] == 0 {
            return Err(Error::config("occlusion patch and stride must be positive"));
        }
        if cfg.patch[a] > dims[a] {
            return Err(Error::config(format!(
                "occlusion patch {:?} larger than volume {dims:?}",
                cfg.patch
            )));
        }
    }
    let base = task_probability(model, case, task, target_class)?;
    let st: Vec<Vec<usize>> = (0..3).map(|a| starts(dims[a], cfg.stride[a])).collect();
    let mut grid = vec![0.0; st[0].len() * st[1].len() * st[2].len()];
    let mut k = 0;
    for &z0 in &st[0] {
        for &y0 in &st[1] {
            for &x0 in &st[2] {
                let lo = [z0, y0, x0];
                let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + cfg.patch[a]).min(dims[a]));
                let volumes: BTreeMap<_, _> = case
                    .volumes()
                    .iter()
                    .map(|(&m, v)| {
                        let mut data = v.data().to_vec();
                        for z in lo[0]..hi[0] {
                            for y in lo[1]..hi[1] {
                                let row = voxel_index(dims, z, y, 0);
                                data[row + lo[2]..row + hi[2]].fill(cfg.fill);
                            }
                        }
                        Ok((m, Volume3D::new(dims, v.spacing(), m, data)?))
                    })
                    .collect::<Result<_>>()?;
                let occluded = case.with_content(volumes, case.mask.clone())?;
                grid[k] = base - task_probability(model, &occluded, task, target_class)?;
                k += 1;
            }
        }
    }
    let near: Vec<Vec<usize>> = (0..3).map(|a| nearest_window(dims[a], cfg.patch[a], &st[a])).collect();
    let mut values = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (near[0][z] * st[1].len() + near[1][y]) * st[2].len() + near[2][x];
                values.push(grid[i]);
            }
        }
    }
    Ok(Heatmap {
        dims,
        spacing: case.spacing(),
        values,
        task,
        target_class,
        method: Method::Occlusion,
        layer: None,
        evaluations: grid.len(),
    })
}

/// Trilinear resize of one `(d, h, w)` channel to `out` (half-pixel centers).
pub fn trilinear_resize(src: &[f64], from: [usize; 3], out: [usize; 3]) -> Vec<f64> {
    let coord = |v: usize, a: usize| -> (usize, usize, f64) {
        let s = ((v as f64 + 0.5) * from[a] as f64 / out[a] as f64 - 0.5).clamp(0.0, (from[a] - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(from[a] - 1), s - lo as f64)
    };
    let mut res = Vec::with_capacity(out.iter().product());
    for z in 0..out[0] {
        let (z0, z1, fz) = coord(z, 0);
        for y in 0..out[1] {
            let (y0, y1, fy) = coord(y, 1);
            for x in 0..out[2] {
                let (x0, x1, fx) = coord(x, 2);
                let at = |a, b, c| src[voxel_index(from, a, b, c)];
                let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                res.push(c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    res
}

/// `ReLU(Σ_c GAP(∂score/∂A)_c · A_c)` at `layer`, upsampled to the input
/// grid and divided by its maximum when that is positive.
pub fn gradcam(model: &MtsUnet, case: &Case, task: Task, layer: Layer, target_class: usize) -> Result<Heatmap> {
    check_target(model, task, target_class)?;
    let input = ModelInput::from_cases(&[case], model.config())?;
    let mut g = Graph::eval();
    let x = InputVars::constants(&mut g, &input);
    let fwd = model.forward(&mut g, x, false)?;
    let out = &fwd.tasks[&task];
    let act = match layer {
        Layer::Stage(n) => fwd.pyramid.stage(n),
        Layer::CmdT2 | Layer::CmdFlair => {
            let cmd = out
                .cmd
                .ok_or_else(|| Error::config(format!("layer {layer} needs a model with the CMD branch on {task}")))?;
            if layer == Layer::CmdT2 {
                cmd.aug_t2
            } else {
                cmd.aug_flair
            }
        }
    };
    let score = g.select(out.final_logits, target_class)?;
    let grads = g.backward(score)?;
    let a = g.value(act);
    let [c, n] = [a.channels(), a.inner()];
    let from = a.spatial();
    let mut cam = vec![0.0; n];
    if let Some(grad) = grads.wrt(act) {
        let w = gap(grad);
        for ch in 0..c {
            let wc = w.data()[ch];
            for (o, v) in cam.iter_mut().zip(a.plane(0, ch)) {
                *o += wc * v;
            }
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let dims = case.dims();
    let mut values = trilinear_resize(&cam, from, dims);
    let m = values.iter().copied().fold(0.0f64, f64::max);
    if m > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v / m).clamp(0.0, 1.0));
    }
    Ok(Heatmap {
        dims,
        spacing: case.spacing(),
        values,
        task,
        target_class,
        method: Method::Gradcam,
        layer: Some(layer),
        evaluations: 0,
    })
}

fn hot(v: f64) -> [f64; 3] {
    [(3.0 * v).clamp(0.0, 1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Axial slices tiled in a near-square grid: grey underlay with the
/// positive part of the heatmap blended on top at `alpha`.
pub fn montage(map: &Heatmap, underlay: Option<&Volume3D>, alpha: f64, max_slices: usize) -> Result<RgbImage> {
    if let Some(u) = underlay {
        if u.dims() != map.dims {
            return Err(Error::shape(format!("underlay {:?} vs heatmap {:?}", u.dims(), map.dims)));
        }
    }
    let [d, h, w] = map.dims;
    let count = max_slices.clamp(1, d);
    let slices: Vec<usize> = (0..count).map(|i| (i * d + d / 2) / count).collect();
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let scale = (128 / h.max(w)).max(1);
    let hmax = map.values.iter().copied().fold(0.0f64, f64::max);
    let (umin, umax) = underlay.map_or((0.0, 1.0), |u| {
        u.data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let span = if umax > umin { umax - umin } else { 1.0 };
    let mut img = RgbImage::new((cols * w * scale) as u32, (rows * h * scale) as u32);
    for (k, &z) in slices.iter().enumerate() {
        let (oy, ox) = ((k / cols) * h * scale, (k % cols) * w * scale);
        for y in 0..h {
            for x in 0..w {
                let grey = underlay.map_or(0.0, |u| (u.get(z, y, x) - umin) / span);
                let heat = if hmax > 0.0 { map.get(z, y, x).max(0.0) / hmax } else { 0.0 };
                let col = hot(heat);
                let a = alpha * heat.min(1.0);
                let px: [u8; 3] = std::array::from_fn(|i| (255.0 * ((1.0 - a) * grey + a * col[i])).round() as u8);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel((ox + x * scale + dx) as u32, (oy + y * scale + dy) as u32, Rgb(px));
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Write `<stem>.nii.gz` and `<stem>.png`; returns both paths.
pub fn save_heatmap(map: &Heatmap, stem: &Path, underlay: Option<&Volume3D>, alpha: f64) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let nii = stem.with_file_name(format!("{name}.nii.gz"));
    let png = stem.with_file_name(format!("{name}.png"));
    write_grid(&nii, map.dims, map.spacing, &map.values)?;
    montage(map, underlay, alpha, 16)?
        .save(&png)
        .map_err(|e| Error::Image {
            path: png.clone(),
            message: e.to_string(),
        })?;
    Ok((nii, png))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierMode, ModelConfig};
    use crate::volumes::{generate_phantom, PhantomSpec};

    fn setup(head: ClassifierMode) -> (MtsUnet, Case) {
        let mut cfg = ModelConfig::toy(Task::Idh);
        cfg.backbone.base_channels = 2;
        cfg.backbone.input_size = [16, 16, 16];
        cfg.cmd.channels = 4;
        cfg.head = head;
        let spec = PhantomSpec {
            grid: [16, 16, 16],
            core_radius: 2.5,
            rim_thickness: 1.5,
            ..PhantomSpec::default()
        };
        (MtsUnet::new(cfg, 1).unwrap(), generate_phantom(&spec, 2).unwrap())
    }

    #[test]
    fn occlusion_counts_positions_and_rejects_big_patches() {
        let (model, case) = setup(ClassifierMode::Tafe);
        let cfg = OcclusionConfig {
            patch: [6; 3],
            stride: [6; 3],
            fill: 0.0,
        };
        let map = occlusion_map(&model, &case, Task::Idh, 1, &cfg).unwrap();
        assert_eq!(map.evaluations, 3 * 3 * 3);
        assert_eq!(map.values.len(), 16 * 16 * 16);
        assert!(map.values.iter().all(|v| v.is_finite()));
        assert_eq!(map, occlusion_map(&model, &case, Task::Idh, 1, &cfg).unwrap());
        let big = OcclusionConfig {
            patch: [17, 4, 4],
            ..cfg
        };
        assert!(matches!(occlusion_map(&model, &case, Task::Idh, 1, &big), Err(Error::Config(_))));
    }

    #[test]
    fn occluding_zeros_with_zero_is_identity() {
        let (model, case) = setup(ClassifierMode::Tafe);
        let zeros: BTreeMap<_, _> = case
            .volumes()
            .iter()
            .map(|(&m, v)| (m, Volume3D::filled(v.dims(), v.spacing(), m, 0.0).unwrap()))
            .collect();
        let blank = case.with_content(zeros, case.mask.clone()).unwrap();
        let cfg = OcclusionConfig {
            patch: [8; 3],
            stride: [4; 3],
            fill: 0.0,
        };
        let map = occlusion_map(&model, &blank, Task::Idh, 0, &cfg).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_window_covers_every_voxel() {
        let st = starts(10, 4);
        assert_eq!(st, [0, 4, 8]);
        let near = nearest_window(10, 4, &st);
        assert_eq!(near, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn gradcam_bounds_and_layers() {
        let (model, case) = setup(ClassifierMode::Dsf);
        for layer in [Layer::Stage(4), Layer::Stage(2), Layer::CmdT2, Layer::CmdFlair] {
            let map = gradcam(&model, &case, Task::Idh, layer, 1).unwrap();
            assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)), "{layer}");
            let m = map.max();
            assert!(m == 0.0 || (m - 1.0).abs() < 1e-12);
            assert_eq!(map, gradcam(&model, &case, Task::Idh, layer, 1).unwrap());
        }
        let (tafe, case) = setup(ClassifierMode::Tafe);
        assert!(matches!(gradcam(&tafe, &case, Task::Idh, Layer::CmdT2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn gradcam_of_layer_off_the_score_path_is_zero() {
        // A CMD-only head sees the encoder only through the detached gate.
        let (model, case) = setup(ClassifierMode::Cmd);
        assert!(model.config().cmd.detach_gate);
        let map = gradcam(&model, &case, Task::Idh, Layer::Stage(1), 1).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_and_method_parsing() {
        assert_eq!("x4".parse::<Layer>().unwrap(), Layer::Stage(4));
        assert_eq!("cmd.flair".parse::<Layer>().unwrap(), Layer::CmdFlair);
        assert!("x5".parse::<Layer>().is_err());
        assert_eq!("gradcam".parse::<Method>().unwrap(), Method::Gradcam);
        assert!("shap".parse::<Method>().is_err());
    }

    #[test]
    fn trilinear_resize_constant_and_identity() {
        let src = vec![2.0; 8];
        assert!(trilinear_resize(&src, [2, 2, 2], [5, 6, 7]).iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let ramp: Vec<f64> = (0..27).map(|i| i as f64).collect();
        assert_eq!(trilinear_resize(&ramp, [3, 3, 3], [3, 3, 3]), ramp);
    }

    #[test]
    fn files_are_written() {
        let (model, case) = setup(ClassifierMode::Tafe);
        let map = gradcam(&model, &case, Task::Idh, Layer::Stage(4), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (nii, png) = save_heatmap(&map, &dir.path().join("out/map"), case.volume(crate::volumes::Modality::T2), 0.5).unwrap();
        assert!(nii.ends_with("map.nii.gz") && nii.exists());
        assert!(png.exists());
        let back = crate::volumes::nifti_io::read_volume(&nii, crate::volumes::Modality::T2).unwrap();
        assert_eq!(back.dims(), map.dims);
    }
}
