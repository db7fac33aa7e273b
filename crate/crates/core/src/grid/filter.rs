use super::{Field, GridSpec, ScalarField, VectorField, Vol};
use crate::error::{Error, Result};

/// Finite-difference gradient in intensity per voxel.
///
/// Central differences in the interior, one-sided differences on the faces.
pub fn spatial_gradient(field: &ScalarField) -> Result<VectorField> {
    let grid = field.grid().clone();
    let vol = grid.vol();
    let n = vol.len();
    let src = field.values();
    let mut out = vec![0.0; n * vol.ndim];
    for axis in 0..vol.ndim {
        let ext = vol.extent(axis);
        if ext < 2 {
            return Err(Error::TooSmall(format!("axis {axis} has {ext} voxels")));
        }
        let s = vol.stride(axis);
        let dst = &mut out[axis * n..(axis + 1) * n];
        for (i, p) in vol.iter_coords().enumerate() {
            let k = p[axis];
            dst[i] = if k == 0 {
                src[i + s] - src[i]
            } else if k == ext - 1 {
                src[i] - src[i - s]
            } else {
                0.5 * (src[i + s] - src[i - s])
            };
        }
    }
    VectorField::new(grid, out)
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn blur_axis(src: &[f64], vol: &Vol, axis: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let ext = vol.extent(axis) as i64;
    let s = vol.stride(axis);
    let mut out = vec![0.0; src.len()];
    for (i, p) in vol.iter_coords().enumerate() {
        let k = p[axis] as i64;
        let base = i - p[axis] * s;
        let mut acc = 0.0;
        for (t, w) in taps.iter().enumerate() {
            let j = (k + t as i64 - r).clamp(0, ext - 1) as usize;
            acc += w * src[base + j * s];
        }
        out[i] = acc;
    }
    out
}

/// Separable Gaussian blur of every channel, clamp-to-edge.
pub fn gaussian_blur_field<F: Field>(field: &F, sigma: f64) -> Result<F> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be non-negative, got {sigma}"
        )));
    }
    let grid: GridSpec = field.grid().clone();
    if sigma == 0.0 {
        return F::from_parts(grid, field.channels(), field.data().to_vec());
    }
    let vol = grid.vol();
    let taps = gaussian_kernel(sigma);
    let n = vol.len();
    let mut data = Vec::with_capacity(field.data().len());
    for c in 0..field.channels() {
        let mut ch = field.data()[c * n..(c + 1) * n].to_vec();
        for axis in 0..vol.ndim {
            ch = blur_axis(&ch, &vol, axis, &taps);
        }
        data.extend(ch);
    }
    F::from_parts(grid, field.channels(), data)
}

pub fn gaussian_blur(field: &ScalarField, sigma: f64) -> Result<ScalarField> {
    gaussian_blur_field(field, sigma)
}
