//! Dense scalar, vector and feature fields on regular 2D/3D grids.
//!
//! Axis order everywhere is `(x, y, z)` and voxel data is stored with `x`
//! varying fastest. Multi-channel fields are planar: channel `c` occupies
//! the contiguous block `c * voxels .. (c + 1) * voxels`.

mod filter;
pub(crate) mod interp;

pub use filter::{gaussian_blur, gaussian_blur_field, gaussian_kernel, spatial_gradient};
pub use interp::Vol;

use crate::error::{Error, Result};
use interp::Stencil;

/// Voxel dimensions and physical spacing of a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridSpec {
    pub fn new(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidArgument(format!(
                "grid must be 2D or 3D, got {} axes",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} spacings for {} axes",
                spacing.len(),
                dims.len()
            )));
        }
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::TooSmall(format!("axis of size {d} (minimum 2)")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    /// Grid with unit spacing.
    pub fn isotropic(dims: &[usize]) -> Result<Self> {
        Self::new(dims, &vec![1.0; dims.len()])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn vol(&self) -> Vol {
        Vol::from_dims(&self.dims)
    }

    /// Same voxel dimensions; spacing is not compared.
    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: grid {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    /// Grid produced by resizing with `factor`, or a too-small error.
    pub fn resized(&self, factor: f64) -> Result<GridSpec> {
        if factor != 0.5 && factor != 2.0 {
            return Err(Error::InvalidArgument(format!(
                "resize factor must be 0.5 or 2.0, got {factor}"
            )));
        }
        let dims: Vec<usize> = self
            .dims
            .iter()
            .map(|&d| (d as f64 * factor).round() as usize)
            .collect();
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::TooSmall(format!(
                "resizing {:?} by {factor} gives an axis of size {d}",
                self.dims
            )));
        }
        let spacing: Vec<f64> = self.spacing.iter().map(|s| s / factor).collect();
        Ok(GridSpec { dims, spacing })
    }
}

/// Common view over planar multi-channel fields.
pub trait Field: Sized {
    fn grid(&self) -> &GridSpec;
    fn channels(&self) -> usize;
    fn data(&self) -> &[f64];
    fn from_parts(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self>;

    fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid().voxel_count();
        &self.data()[c * n..(c + 1) * n]
    }
}

fn check_values(grid: &GridSpec, channels: usize, values: &[f64], what: &str) -> Result<()> {
    let expected = grid.voxel_count() * channels;
    if values.len() != expected {
        return Err(Error::Shape(format!(
            "{what}: {} values for {channels} channel(s) on {:?} (expected {expected})",
            values.len(),
            grid.dims()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what}: non-finite value")));
    }
    Ok(())
}

/// One real intensity per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, 1, &values, "scalar field")?;
        Ok(Self { grid, values })
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        let n = grid.voxel_count();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    /// Builds a field by evaluating `f` at every voxel's `(x, y, z)` index.
    pub fn from_fn(grid: GridSpec, f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let vol = grid.vol();
        let values = vol.iter_coords().map(f).collect();
        Self::new(grid, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sample(&self, point: &[f64]) -> Result<f64> {
        Ok(sample_linear(self, point)?[0])
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

impl Field for ScalarField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn channels(&self) -> usize {
        1
    }
    fn data(&self) -> &[f64] {
        &self.values
    }
    fn from_parts(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 {
            return Err(Error::Shape(format!(
                "scalar field needs 1 channel, got {channels}"
            )));
        }
        Self::new(grid, data)
    }
}

/// `D` components per voxel, in voxel units, stored planar by component.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        let d = grid.ndim();
        check_values(&grid, d, &values, "vector field")?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.voxel_count() * grid.ndim();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Same vector at every voxel.
    pub fn constant(grid: GridSpec, vector: &[f64]) -> Result<Self> {
        if vector.len() != grid.ndim() {
            return Err(Error::Shape(format!(
                "{}-vector on a {}D grid",
                vector.len(),
                grid.ndim()
            )));
        }
        let n = grid.voxel_count();
        let values = vector
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        Self::new(grid, values)
    }

    /// Builds a field from a per-voxel closure returning the vector at `(x, y, z)`.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Result<Self> {
        let n = grid.voxel_count();
        let d = grid.ndim();
        let mut values = vec![0.0; n * d];
        for (i, p) in grid.vol().iter_coords().enumerate() {
            let v = f(p);
            for c in 0..d {
                values[c * n + i] = v[c];
            }
        }
        Self::new(grid, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, c: usize) -> &[f64] {
        self.channel(c)
    }

    /// Vector stored at voxel index `i`.
    pub fn at(&self, i: usize) -> [f64; 3] {
        let n = self.grid.voxel_count();
        let mut v = [0.0; 3];
        for (c, slot) in v.iter_mut().enumerate().take(self.grid.ndim()) {
            *slot = self.values[c * n + i];
        }
        v
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        VectorField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.grid.check_same(&other.grid, "vector add")?;
        Ok(VectorField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Largest Euclidean vector norm over all voxels.
    pub fn max_norm(&self) -> f64 {
        self.max_norm_where(|_| true)
    }

    pub(crate) fn max_norm_where(&self, mut keep: impl FnMut([usize; 3]) -> bool) -> f64 {
        let d = self.grid.ndim();
        let mut best: f64 = 0.0;
        for (i, p) in self.grid.vol().iter_coords().enumerate() {
            if !keep(p) {
                continue;
            }
            let v = self.at(i);
            let n2: f64 = v[..d].iter().map(|x| x * x).sum();
            best = best.max(n2.sqrt());
        }
        best
    }
}

impl Field for VectorField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn channels(&self) -> usize {
        self.grid.ndim()
    }
    fn data(&self) -> &[f64] {
        &self.values
    }
    fn from_parts(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != grid.ndim() {
            return Err(Error::Shape(format!(
                "vector field on a {}D grid needs {} channels, got {channels}",
                grid.ndim(),
                grid.ndim()
            )));
        }
        Self::new(grid, data)
    }
}

/// `C` real channels per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: GridSpec,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid: GridSpec, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("feature map with 0 channels".into()));
        }
        check_values(&grid, channels, &values, "feature map")?;
        Ok(Self {
            grid,
            channels,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl Field for FeatureMap {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn channels(&self) -> usize {
        self.channels
    }
    fn data(&self) -> &[f64] {
        &self.values
    }
    fn from_parts(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(grid, channels, data)
    }
}

pub(crate) fn point3(grid: &GridSpec, point: &[f64]) -> Result<[f64; 3]> {
    if point.len() != grid.ndim() {
        return Err(Error::InvalidArgument(format!(
            "{}-D point on a {}-D grid",
            point.len(),
            grid.ndim()
        )));
    }
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite sample point {point:?}"
        )));
    }
    let mut p = [0.0; 3];
    p[..point.len()].copy_from_slice(point);
    Ok(p)
}

/// Multi-linear interpolation of every channel at `point` (voxel coordinates).
///
/// Coordinates outside the grid are clamped to the boundary.
pub fn sample_linear<F: Field>(field: &F, point: &[f64]) -> Result<Vec<f64>> {
    let p = point3(field.grid(), point)?;
    let vol = field.grid().vol();
    let st = Stencil::new(&vol, p);
    let n = vol.len();
    Ok((0..field.channels())
        .map(|c| st.apply(&field.data()[c * n..(c + 1) * n]))
        .collect())
}

/// Align-corners multi-linear resize by 0.5 or 2.0.
pub fn resize_linear<F: Field>(field: &F, factor: f64) -> Result<F> {
    let grid = field.grid().resized(factor)?;
    let data = interp::resize(
        field.data(),
        field.channels(),
        &field.grid().vol(),
        &grid.vol(),
    );
    F::from_parts(grid, field.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(dims: &[usize], seed: u64) -> ScalarField {
        let grid = GridSpec::isotropic(dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.voxel_count();
        ScalarField::new(grid, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn grid_rejects_bad_specs() {
        assert!(matches!(GridSpec::isotropic(&[4]), Err(Error::InvalidArgument(_))));
        assert!(matches!(GridSpec::isotropic(&[4, 1]), Err(Error::TooSmall(_))));
        assert!(GridSpec::new(&[4, 4], &[1.0, 0.0]).is_err());
        assert!(GridSpec::new(&[4, 4], &[1.0]).is_err());
    }

    #[test]
    fn field_rejects_non_finite_and_wrong_count() {
        let g = GridSpec::isotropic(&[2, 2]).unwrap();
        assert!(ScalarField::new(g.clone(), vec![0.0; 3]).is_err());
        assert!(ScalarField::new(g.clone(), vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
        assert!(VectorField::new(g, vec![0.0; 4]).is_err());
    }

    #[test]
    fn sample_midpoint_of_two_voxels_is_their_mean() {
        // 2x2 grid varying only along x
        let g = GridSpec::isotropic(&[2, 2]).unwrap();
        let f = ScalarField::new(g, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(f.sample(&[0.5, 0.0]).unwrap(), 0.5);
        assert_eq!(f.sample(&[0.5, 0.7]).unwrap(), 0.5);
    }

    #[test]
    fn sample_at_voxel_centers_reproduces_values() {
        let f = random_field(&[5, 4, 3], 1);
        for (i, p) in f.grid().vol().iter_coords().enumerate() {
            let s = f.sample(&[p[0] as f64, p[1] as f64, p[2] as f64]).unwrap();
            assert_eq!(s, f.values()[i]);
        }
    }

    #[test]
    fn sample_clamps_outside_domain() {
        let f = random_field(&[4, 4], 7);
        let v = f.values();
        // (0, 1.5) sits halfway between voxels (0,1) and (0,2)
        let direct = 0.5 * (v[4] + v[8]);
        let clamped = f.sample(&[-3.0, 1.5]).unwrap();
        assert!((clamped - direct).abs() < 1e-15);
        assert_eq!(clamped, f.sample(&[0.0, 1.5]).unwrap());
        assert_eq!(f.sample(&[10.0, 10.0]).unwrap(), v[15]);
    }

    #[test]
    fn sample_rejects_non_finite_point() {
        let f = random_field(&[4, 4], 2);
        assert!(matches!(
            f.sample(&[f64::NAN, 0.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(f.sample(&[0.0]).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let g = GridSpec::isotropic(&[8, 6, 4]).unwrap();
        let f = ScalarField::constant(g, 3.25);
        for factor in [0.5, 2.0] {
            let r = resize_linear(&f, factor).unwrap();
            assert!(r.values().iter().all(|&v| (v - 3.25).abs() < 1e-14));
        }
    }

    #[test]
    fn resize_dims_and_spacing() {
        let g = GridSpec::new(&[8, 6], &[1.0, 2.0]).unwrap();
        let f = ScalarField::constant(g, 0.0);
        let down = resize_linear(&f, 0.5).unwrap();
        assert_eq!(down.grid().dims(), &[4, 3]);
        assert_eq!(down.grid().spacing(), &[2.0, 4.0]);
        let up = resize_linear(&f, 2.0).unwrap();
        assert_eq!(up.grid().dims(), &[16, 12]);
        let tiny = resize_linear(&down, 0.5).unwrap();
        assert_eq!(tiny.grid().dims(), &[2, 2]);
        assert!(matches!(resize_linear(&tiny, 0.5), Err(Error::TooSmall(_))));
        assert!(resize_linear(&f, 3.0).is_err());
    }

    #[test]
    fn resize_ramp_keeps_endpoints() {
        let g = GridSpec::isotropic(&[16, 4]).unwrap();
        let f = ScalarField::from_fn(g, |p| 3.0 * p[0] as f64 - 1.0).unwrap();
        let r = resize_linear(&f, 0.5).unwrap();
        let nx = r.grid().dims()[0];
        for y in 0..r.grid().dims()[1] {
            assert!((r.values()[y * nx] + 1.0).abs() < 1e-12);
            assert!((r.values()[y * nx + nx - 1] - 44.0).abs() < 1e-12);
        }
        // still a ramp: evenly spaced samples
        let step = r.values()[1] - r.values()[0];
        for x in 1..nx {
            assert!((r.values()[x] - r.values()[x - 1] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_round_trip_on_ramp() {
        let g = GridSpec::isotropic(&[8, 2]).unwrap();
        let f = ScalarField::from_fn(g, |p| 0.37 * p[0] as f64 + 0.1).unwrap();
        let back = resize_linear(&resize_linear(&f, 2.0).unwrap(), 0.5).unwrap();
        for (a, b) in f.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn vector_constant_and_max_norm() {
        let g = GridSpec::isotropic(&[3, 3]).unwrap();
        let v = VectorField::constant(g, &[3.0, 4.0]).unwrap();
        assert_eq!(v.max_norm(), 5.0);
        assert_eq!(v.at(4), [3.0, 4.0, 0.0]);
    }
}
