//! NIfTI-1 reading and writing (`.nii` and `.nii.gz`).
//!
//! NIfTI stores `i` (x) fastest; [`Volume3D`] is row-major `(z, y, x)` with
//! x fastest, so dims and spacing are reversed at the boundary.

use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{MaskVolume, Modality, Volume3D};
use crate::error::{Error, Result};

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read_grid(path: &Path) -> Result<([usize; 3], [f64; 3], Vec<f64>)> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| image_err(path, e))?;
    let pixdim = obj.header().pixdim;
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| image_err(path, e))?;
    let shape = arr.shape().to_vec();
    // Trailing singleton dims (e.g. a 4-D file with one frame) are tolerated.
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(image_err(path, format!("expected a 3-D volume, got shape {shape:?}")));
    }
    let dims = [shape[2], shape[1], shape[0]];
    let spacing = [pixdim[3] as f64, pixdim[2] as f64, pixdim[1] as f64].map(|s| if s > 0.0 { s } else { 1.0 });
    // Iterating the transposed view yields (z, y, x) order with x fastest;
    // trailing singleton axes do not change the order.
    let data: Vec<f64> = arr.t().iter().copied().collect();
    Ok((dims, spacing, data))
}

pub fn read_volume(path: &Path, modality: Modality) -> Result<Volume3D> {
    let (dims, spacing, data) = read_grid(path)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(image_err(path, "volume contains NaN or Inf"));
    }
    Volume3D::new(dims, spacing, modality, data).map_err(|e| image_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let (dims, spacing, data) = read_grid(path)?;
    let mut labels = Vec::with_capacity(data.len());
    for v in data {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(image_err(path, format!("mask value {v} is not a small non-negative integer")));
        }
        labels.push(v as u8);
    }
    MaskVolume::infer(dims, spacing, labels)
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim[1] = spacing[2] as f32;
    h.pixdim[2] = spacing[1] as f32;
    h.pixdim[3] = spacing[0] as f32;
    h.xyzt_units = 2; // millimetres
    h
}

fn nifti_array<T: Copy>(dims: [usize; 3], data: Vec<T>) -> Array3<T> {
    // Row-major (z, y, x) data is column-major (x, y, z).
    Array3::from_shape_vec((dims[2], dims[1], dims[0]).f(), data).expect("dims match data")
}

/// Write as float32; the file is gzip-compressed when the path ends in `.gz`.
pub fn write_volume(path: &Path, v: &Volume3D) -> Result<()> {
    write_grid(path, v.dims(), v.spacing(), v.data())
}

/// Write any `(z, y, x)` scalar grid as float32.
pub fn write_grid(path: &Path, dims: [usize; 3], spacing: [f64; 3], data: &[f64]) -> Result<()> {
    if data.len() != dims.iter().product::<usize>() {
        return Err(Error::shape(format!("{} values for grid {dims:?}", data.len())));
    }
    let h = header_for(spacing);
    let data: Vec<f32> = data.iter().map(|&x| x as f32).collect();
    WriterOptions::new(path)
        .reference_header(&h)
        .write_nifti(&nifti_array(dims, data))
        .map_err(|e| image_err(path, e))
}

/// Write as uint8 labels.
pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    let h = header_for(m.spacing());
    WriterOptions::new(path)
        .reference_header(&h)
        .write_nifti(&nifti_array(m.dims(), m.labels().to_vec()))
        .map_err(|e| image_err(path, e))
}
