//! Deformation algebra: backward warping, composition, scaling-and-squaring
//! exponentiation of stationary velocity fields, coarse-to-fine pyramid
//! composition and Jacobian-based smoothness metrics.
//!
//! A deformation is stored as its displacement from identity, so that
//! `phi(p) = p + u(p)` with `u` in voxel units of the grid it lives on.

use crate::error::{Error, Result};
use crate::grid::interp::Stencil;
use crate::grid::{resize_linear, Field, GridSpec, ScalarField, VectorField, Vol};

/// Default number of squarings per pyramid level (128 effective Euler steps).
pub const DEFAULT_SQUARING_STEPS: usize = 7;

/// Pyramid depth and integration resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub levels: usize,
    pub squaring_steps: usize,
    pub max_displacement: Option<f64>,
}

impl PyramidConfig {
    pub fn new(levels: usize, squaring_steps: usize) -> Result<Self> {
        let cfg = Self {
            levels,
            squaring_steps,
            max_displacement: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives the level count from the largest expected displacement.
    pub fn for_max_displacement(d_max: f64, squaring_steps: usize) -> Result<Self> {
        let cfg = Self {
            levels: required_levels(d_max)?,
            squaring_steps,
            max_displacement: Some(d_max),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if self.squaring_steps < 1 {
            return Err(Error::Config("squaring_steps must be >= 1".into()));
        }
        if let Some(d) = self.max_displacement {
            if (2f64).powi(self.levels as i32 - 1) <= d {
                return Err(Error::Config(format!(
                    "{} levels cannot resolve displacements of {d} voxels",
                    self.levels
                )));
            }
        }
        Ok(())
    }
}

/// Smallest level count `n` with `2^(n-1) > d_max`.
pub fn required_levels(d_max: f64) -> Result<usize> {
    if !(d_max.is_finite() && d_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max displacement must be positive, got {d_max}"
        )));
    }
    let mut n = 1usize;
    while (2f64).powi(n as i32 - 1) <= d_max {
        n += 1;
    }
    Ok(n)
}

/// A spatial transform `phi(p) = p + u(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    displacement: VectorField,
}

impl Deformation {
    pub fn from_displacement(displacement: VectorField) -> Self {
        Self { displacement }
    }

    pub fn identity(grid: GridSpec) -> Self {
        Self {
            displacement: VectorField::zeros(grid),
        }
    }

    pub fn displacement(&self) -> &VectorField {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField {
        self.displacement
    }

    pub fn grid(&self) -> &GridSpec {
        self.displacement.grid()
    }

    pub fn is_identity(&self) -> bool {
        self.displacement.values().iter().all(|&v| v == 0.0)
    }
}

pub fn identity(grid: GridSpec) -> Deformation {
    Deformation::identity(grid)
}

/// Planar backward warp: `out_c(p) = src_c(p + u(p))`.
pub(crate) fn warp_data(src: &[f64], channels: usize, vol: &Vol, disp: &[f64]) -> Vec<f64> {
    let n = vol.len();
    let mut out = vec![0.0; channels * n];
    for (i, p) in vol.iter_coords().enumerate() {
        let mut q = [0.0; 3];
        for a in 0..vol.ndim {
            q[a] = p[a] as f64 + disp[a * n + i];
        }
        let st = Stencil::new(vol, q);
        for c in 0..channels {
            out[c * n + i] = st.apply(&src[c * n..(c + 1) * n]);
        }
    }
    out
}

/// Backward warp of any field through `phi`.
pub fn warp<F: Field>(field: &F, phi: &Deformation) -> Result<F> {
    field.grid().check_same(phi.grid(), "warp")?;
    let vol = field.grid().vol();
    let out = warp_data(
        field.data(),
        field.channels(),
        &vol,
        phi.displacement.values(),
    );
    F::from_parts(field.grid().clone(), field.channels(), out)
}

/// `compose(a, b)(p) = a(b(p))`, i.e. `u(p) = u_b(p) + u_a(p + u_b(p))`.
pub fn compose(outer: &Deformation, inner: &Deformation) -> Result<Deformation> {
    outer.grid().check_same(inner.grid(), "compose")?;
    let grid = inner.grid().clone();
    let vol = grid.vol();
    let ub = inner.displacement.values();
    let mut u = warp_data(outer.displacement.values(), vol.ndim, &vol, ub);
    for (v, b) in u.iter_mut().zip(ub) {
        *v += b;
    }
    Ok(Deformation::from_displacement(VectorField::new(grid, u)?))
}

/// Scaling-and-squaring: `u <- v / 2^K`, then `K` self-compositions.
pub fn exp_svf(v: &VectorField, squaring_steps: usize) -> Result<Deformation> {
    if squaring_steps < 1 {
        return Err(Error::InvalidArgument("squaring_steps must be >= 1".into()));
    }
    let mut phi = Deformation::from_displacement(v.scaled(1.0 / (1u64 << squaring_steps) as f64));
    for _ in 0..squaring_steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// 2x align-corners upsampling with displacement values doubled.
pub fn upsample_deformation(phi: &Deformation) -> Result<Deformation> {
    let up = resize_linear(&phi.displacement, 2.0)?;
    Ok(Deformation::from_displacement(up.scaled(2.0)))
}

fn check_pyramid(residuals: &[VectorField]) -> Result<()> {
    let Some(finest) = residuals.first() else {
        return Err(Error::Shape("empty residual pyramid".into()));
    };
    let mut expected = finest.grid().clone();
    for (l, r) in residuals.iter().enumerate().skip(1) {
        expected = expected.resized(0.5)?;
        if r.grid().dims() != expected.dims() {
            return Err(Error::Shape(format!(
                "level {} residual has dims {:?}, expected {:?}",
                l + 1,
                r.grid().dims(),
                expected.dims()
            )));
        }
        // upsampling must land exactly on the finer grid
        let back = r.grid().resized(2.0)?;
        if back.dims() != residuals[l - 1].grid().dims() {
            return Err(Error::Shape(format!(
                "level {} dims {:?} do not upsample onto {:?}",
                l + 1,
                r.grid().dims(),
                residuals[l - 1].grid().dims()
            )));
        }
    }
    Ok(())
}

fn fold_pyramid(
    residuals: &[VectorField],
    squaring_steps: usize,
    combine: impl Fn(&Deformation, &Deformation) -> Result<Deformation>,
) -> Result<Deformation> {
    check_pyramid(residuals)?;
    let coarsest = residuals.len() - 1;
    let mut phi = exp_svf(&residuals[coarsest], squaring_steps)?;
    for r in residuals[..coarsest].iter().rev() {
        let up = upsample_deformation(&phi)?;
        let delta = exp_svf(r, squaring_steps)?;
        phi = combine(&up, &delta)?;
    }
    Ok(phi)
}

/// Coarse-to-fine composition of per-level residual velocities.
///
/// `residuals[0]` is the finest level. The coarsest deformation is applied
/// outermost: `phi_l = up(phi_{l+1}) o exp(u_l)`.
pub fn compose_pyramid(residuals: &[VectorField], squaring_steps: usize) -> Result<Deformation> {
    fold_pyramid(residuals, squaring_steps, compose)
}

/// Ablation arm of [`compose_pyramid`] combining levels by displacement addition.
pub fn compose_pyramid_additive(
    residuals: &[VectorField],
    squaring_steps: usize,
) -> Result<Deformation> {
    fold_pyramid(residuals, squaring_steps, |up, delta| {
        Ok(Deformation::from_displacement(
            up.displacement().add(delta.displacement())?,
        ))
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stencilling {
    Central,
    Forward,
}

fn check_jacobian_grid(grid: &GridSpec) -> Result<()> {
    if let Some(d) = grid.dims().iter().find(|&&d| d < 3) {
        return Err(Error::TooSmall(format!(
            "Jacobian needs >= 3 voxels per axis, got {d}"
        )));
    }
    Ok(())
}

fn determinant(m: &[[f64; 3]; 3], d: usize) -> f64 {
    if d == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

fn jacobian_values(phi: &Deformation, mode: Stencilling) -> Vec<f64> {
    let vol = phi.grid().vol();
    let d = vol.ndim;
    let n = vol.len();
    let u = phi.displacement.values();
    let mut out = vec![0.0; n];
    for (i, p) in vol.iter_coords().enumerate() {
        // m[c][a] = d phi_c / d x_a
        let mut m = [[0.0; 3]; 3];
        for a in 0..d {
            let ext = vol.extent(a);
            let s = vol.stride(a);
            let k = p[a];
            let (lo, hi, h) = match mode {
                Stencilling::Forward if k + 1 < ext => (i, i + s, 1.0),
                _ if k == 0 => (i, i + s, 1.0),
                _ if k == ext - 1 => (i - s, i, 1.0),
                Stencilling::Central => (i - s, i + s, 2.0),
                Stencilling::Forward => unreachable!(),
            };
            for c in 0..d {
                let du = (u[c * n + hi] - u[c * n + lo]) / h;
                m[c][a] = du + if c == a { 1.0 } else { 0.0 };
            }
        }
        out[i] = determinant(&m, d);
    }
    out
}

/// Per-voxel determinant of the Jacobian of `p + u(p)` (central differences,
/// one-sided on faces).
pub fn jacobian_determinant(phi: &Deformation) -> Result<ScalarField> {
    check_jacobian_grid(phi.grid())?;
    ScalarField::new(
        phi.grid().clone(),
        jacobian_values(phi, Stencilling::Central),
    )
}

/// Standard deviation of `log det J` over interior voxels with `det > 0`.
pub fn sdlogj(phi: &Deformation) -> Result<f64> {
    check_jacobian_grid(phi.grid())?;
    let vol = phi.grid().vol();
    let det = jacobian_values(phi, Stencilling::Central);
    let logs: Vec<f64> = vol
        .iter_coords()
        .zip(&det)
        .filter(|(p, &j)| vol.is_interior(*p, 1) && j > 0.0)
        .map(|(_, &j)| j.ln())
        .collect();
    if logs.is_empty() {
        return Err(Error::UndefinedMetric(
            "no interior voxel with positive Jacobian determinant".into(),
        ));
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / logs.len() as f64;
    Ok(var.sqrt())
}

/// Percentage of interior voxels whose forward-difference Jacobian
/// determinant is non-positive.
pub fn ndv_percent(phi: &Deformation) -> Result<f64> {
    check_jacobian_grid(phi.grid())?;
    let vol = phi.grid().vol();
    let det = jacobian_values(phi, Stencilling::Forward);
    let (mut bad, mut total) = (0usize, 0usize);
    for (p, &j) in vol.iter_coords().zip(&det) {
        if vol.is_interior(p, 1) {
            total += 1;
            if j <= 0.0 {
                bad += 1;
            }
        }
    }
    Ok(100.0 * bad as f64 / total as f64)
}

/// Smallest interior central-difference Jacobian determinant.
pub fn min_interior_jacobian(phi: &Deformation) -> Result<f64> {
    let det = jacobian_determinant(phi)?;
    let vol = phi.grid().vol();
    Ok(vol
        .iter_coords()
        .zip(det.values())
        .filter(|(p, _)| vol.is_interior(*p, 1))
        .map(|(_, &j)| j)
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::gaussian_blur_field;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn smooth_field(dims: &[usize], sigma: f64, max_norm: f64, seed: u64) -> VectorField {
        let grid = GridSpec::isotropic(dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.voxel_count() * grid.ndim();
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = gaussian_blur_field(&VectorField::new(grid, noise).unwrap(), sigma).unwrap();
        let m = v.max_norm();
        v.scaled(max_norm / m)
    }

    fn ramp(dims: &[usize]) -> ScalarField {
        ScalarField::from_fn(GridSpec::isotropic(dims).unwrap(), |p| p[0] as f64).unwrap()
    }

    #[test]
    fn required_levels_table() {
        assert_eq!(required_levels(10.0).unwrap(), 5);
        assert_eq!(required_levels(1.0).unwrap(), 2);
        assert_eq!(required_levels(16.0).unwrap(), 6);
        assert_eq!(required_levels(0.5).unwrap(), 1);
        assert!(matches!(required_levels(0.0), Err(Error::InvalidArgument(_))));
        assert!(required_levels(-3.0).is_err());
    }

    #[test]
    fn required_levels_matches_enumeration() {
        for d in [0.3, 1.0, 1.5, 2.0, 7.9, 8.0, 16.0, 31.0, 100.0] {
            let n = required_levels(d).unwrap();
            assert!(2f64.powi(n as i32 - 1) > d);
            assert!(n == 1 || 2f64.powi(n as i32 - 2) <= d);
        }
    }

    #[test]
    fn pyramid_config_checks_d_max() {
        assert!(PyramidConfig::new(0, 7).is_err());
        assert!(PyramidConfig::new(3, 0).is_err());
        let cfg = PyramidConfig::for_max_displacement(10.0, 7).unwrap();
        assert_eq!(cfg.levels, 5);
        let bad = PyramidConfig {
            levels: 4,
            squaring_steps: 7,
            max_displacement: Some(10.0),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_warp_and_jacobian() {
        let g = GridSpec::isotropic(&[6, 5, 4]).unwrap();
        let id = identity(g.clone());
        assert!(id.is_identity());
        let f = ScalarField::from_fn(g, |p| (p[0] * 3 + p[1] * 7 + p[2]) as f64).unwrap();
        assert_eq!(warp(&f, &id).unwrap(), f);
        let det = jacobian_determinant(&id).unwrap();
        assert!(det.values().iter().all(|&d| d == 1.0));
        assert_eq!(sdlogj(&id).unwrap(), 0.0);
        assert_eq!(ndv_percent(&id).unwrap(), 0.0);
    }

    #[test]
    fn warp_translation_shifts_ramp() {
        let f = ramp(&[8, 4, 4]);
        let t = Deformation::from_displacement(
            VectorField::constant(f.grid().clone(), &[1.0, 0.0, 0.0]).unwrap(),
        );
        let w = warp(&f, &t).unwrap();
        for (p, v) in f.grid().vol().iter_coords().zip(w.values()) {
            let want = ((p[0] + 1).min(7)) as f64;
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn warp_grid_mismatch() {
        let f = ramp(&[8, 4]);
        let id = identity(GridSpec::isotropic(&[4, 4]).unwrap());
        assert!(matches!(warp(&f, &id), Err(Error::Shape(_))));
    }

    #[test]
    fn warp_matches_brute_force_interpolation() {
        let dims = [16, 16, 16];
        let grid = GridSpec::isotropic(&dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let values: Vec<f64> = (0..4096).map(|_| StandardNormal.sample(&mut rng)).collect();
        let f = ScalarField::new(grid, values.clone()).unwrap();
        let phi = Deformation::from_displacement(smooth_field(&dims, 2.0, 2.5, 4));
        let w = warp(&f, &phi).unwrap();
        let at = |x: usize, y: usize, z: usize| values[x + 16 * (y + 16 * z)];
        for (i, p) in f.grid().vol().iter_coords().enumerate() {
            let u = phi.displacement().at(i);
            let q: Vec<f64> = (0..3)
                .map(|a| (p[a] as f64 + u[a]).clamp(0.0, 15.0))
                .collect();
            let b: Vec<usize> = q.iter().map(|c| (c.floor() as usize).min(14)).collect();
            let t: Vec<f64> = (0..3).map(|a| q[a] - b[a] as f64).collect();
            let mut want = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wx = if dx == 1 { t[0] } else { 1.0 - t[0] };
                        let wy = if dy == 1 { t[1] } else { 1.0 - t[1] };
                        let wz = if dz == 1 { t[2] } else { 1.0 - t[2] };
                        want += wx * wy * wz * at(b[0] + dx, b[1] + dy, b[2] + dz);
                    }
                }
            }
            assert!((w.values()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_with_identity_is_noop() {
        let a = Deformation::from_displacement(smooth_field(&[12, 10], 2.0, 1.5, 9));
        let id = identity(a.grid().clone());
        assert_eq!(compose(&a, &id).unwrap(), a);
        let b = compose(&id, &a).unwrap();
        for (x, y) in b.displacement().values().iter().zip(a.displacement().values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn composed_translations_add() {
        let g = GridSpec::isotropic(&[10, 10, 10]).unwrap();
        let t1 = Deformation::from_displacement(VectorField::constant(g.clone(), &[0.5, -1.0, 0.25]).unwrap());
        let t2 = Deformation::from_displacement(VectorField::constant(g.clone(), &[1.25, 0.5, -0.75]).unwrap());
        let c = compose(&t1, &t2).unwrap();
        let vol = g.vol();
        for (i, p) in vol.iter_coords().enumerate() {
            if vol.is_interior(p, 3) {
                let u = c.displacement().at(i);
                assert!((u[0] - 1.75).abs() < 1e-12);
                assert!((u[1] + 0.5).abs() < 1e-12);
                assert!((u[2] + 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_matches_double_warp() {
        let dims = [24, 24, 24];
        let grid = GridSpec::isotropic(&dims).unwrap();
        // smooth image so interpolation error stays tiny
        let f = ScalarField::from_fn(grid, |p| {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            (0.08 * x).sin() + (0.06 * y).cos() * (0.05 * z + 0.3).sin()
        })
        .unwrap();
        let a = Deformation::from_displacement(smooth_field(&dims, 3.0, 0.5, 1));
        let b = Deformation::from_displacement(smooth_field(&dims, 3.0, 0.5, 2));
        let twice = warp(&warp(&f, &a).unwrap(), &b).unwrap();
        let once = warp(&f, &compose(&a, &b).unwrap()).unwrap();
        let vol = f.grid().vol();
        let mut worst: f64 = 0.0;
        for (p, (x, y)) in vol.iter_coords().zip(twice.values().iter().zip(once.values())) {
            if vol.is_interior(p, 2) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-3, "double-warp mismatch {worst}");
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let g = GridSpec::isotropic(&[8, 8]).unwrap();
        assert!(exp_svf(&VectorField::zeros(g), 7).unwrap().is_identity());
    }

    #[test]
    fn exp_of_constant_is_exact_translation() {
        let g = GridSpec::isotropic(&[16, 16, 16]).unwrap();
        let c = [0.7, -1.3, 2.1];
        let phi = exp_svf(&VectorField::constant(g.clone(), &c).unwrap(), 7).unwrap();
        let vol = g.vol();
        for (i, p) in vol.iter_coords().enumerate() {
            if vol.is_interior(p, 3) {
                let u = phi.displacement().at(i);
                for a in 0..3 {
                    assert!((u[a] - c[a]).abs() < 1e-12);
                }
            }
        }
        assert!(exp_svf(&VectorField::zeros(g), 0).is_err());
    }

    #[test]
    fn exp_inverse_consistency() {
        let v = smooth_field(&[20, 20, 20], 3.0, 0.5, 17);
        let fwd = exp_svf(&v, 7).unwrap();
        let bwd = exp_svf(&v.scaled(-1.0), 7).unwrap();
        let c = compose(&fwd, &bwd).unwrap();
        let vol = v.grid().vol();
        let worst = c.displacement().max_norm_where(|p| vol.is_interior(p, 1));
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn upsample_identity_and_constant() {
        let g = GridSpec::isotropic(&[5, 6]).unwrap();
        let up = upsample_deformation(&identity(g.clone())).unwrap();
        assert!(up.is_identity());
        assert_eq!(up.grid().dims(), &[10, 12]);
        let c = Deformation::from_displacement(VectorField::constant(g, &[0.5, -1.5]).unwrap());
        let up = upsample_deformation(&c).unwrap();
        assert!(up.displacement().component(0).iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert!(up.displacement().component(1).iter().all(|&v| (v + 3.0).abs() < 1e-14));
    }

    #[test]
    fn upsample_affine_matches_analytic_map() {
        // coarse u(p) = (alpha - 1) p; a fine voxel q sits at coarse position
        // q (n_c - 1) / (n_f - 1) under align-corners
        let alpha = 1.1;
        let g = GridSpec::isotropic(&[6, 7, 5]).unwrap();
        let coarse = VectorField::from_fn(g, |p| {
            [
                (alpha - 1.0) * p[0] as f64,
                (alpha - 1.0) * p[1] as f64,
                (alpha - 1.0) * p[2] as f64,
            ]
        })
        .unwrap();
        let up = upsample_deformation(&Deformation::from_displacement(coarse)).unwrap();
        let fine = up.grid().clone();
        let n = fine.voxel_count();
        for (i, q) in fine.vol().iter_coords().enumerate() {
            for a in 0..3 {
                let nc = [6.0, 7.0, 5.0][a];
                let nf = fine.dims()[a] as f64;
                let want = 2.0 * (alpha - 1.0) * q[a] as f64 * (nc - 1.0) / (nf - 1.0);
                assert!((up.displacement().values()[a * n + i] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pyramid_of_zeros_is_identity() {
        for levels in 1..4 {
            let mut dims = vec![16usize, 16];
            let mut res = Vec::new();
            for _ in 0..levels {
                res.push(VectorField::zeros(GridSpec::isotropic(&dims).unwrap()));
                dims = dims.iter().map(|d| d / 2).collect();
            }
            assert!(compose_pyramid(&res, 7).unwrap().is_identity());
            assert!(compose_pyramid_additive(&res, 7).unwrap().is_identity());
        }
    }

    #[test]
    fn single_level_pyramid_is_exp() {
        let v = smooth_field(&[12, 12], 2.0, 0.8, 3);
        let want = exp_svf(&v, 5).unwrap();
        assert_eq!(compose_pyramid(std::slice::from_ref(&v), 5).unwrap(), want);
        assert_eq!(compose_pyramid_additive(std::slice::from_ref(&v), 5).unwrap(), want);
    }

    #[test]
    fn pyramid_shape_errors() {
        let a = VectorField::zeros(GridSpec::isotropic(&[16, 16]).unwrap());
        let b = VectorField::zeros(GridSpec::isotropic(&[6, 8]).unwrap());
        assert!(matches!(compose_pyramid(&[a, b], 7), Err(Error::Shape(_))));
        assert!(compose_pyramid(&[], 7).is_err());
    }

    #[test]
    fn scaling_field_determinant() {
        let alpha: f64 = 1.1;
        let g = GridSpec::isotropic(&[7, 7, 7]).unwrap();
        let u = VectorField::from_fn(g, |p| {
            [
                (alpha - 1.0) * p[0] as f64,
                (alpha - 1.0) * p[1] as f64,
                (alpha - 1.0) * p[2] as f64,
            ]
        })
        .unwrap();
        let phi = Deformation::from_displacement(u);
        let det = jacobian_determinant(&phi).unwrap();
        let vol = phi.grid().vol();
        for (p, d) in vol.iter_coords().zip(det.values()) {
            if vol.is_interior(p, 1) {
                assert!((d - 1.331).abs() < 1e-12);
            }
        }
        assert!(sdlogj(&phi).unwrap() < 1e-12);
    }

    #[test]
    fn jacobian_matches_brute_force() {
        let dims = [9, 8, 7];
        let phi = Deformation::from_displacement(smooth_field(&dims, 1.5, 0.6, 8));
        let det = jacobian_determinant(&phi).unwrap();
        let u = phi.displacement();
        let n = 9 * 8 * 7;
        let get = |c: usize, p: [i64; 3]| u.values()[c * n + (p[0] + 9 * (p[1] + 8 * p[2])) as usize];
        for (i, p) in phi.grid().vol().iter_coords().enumerate() {
            let p = [p[0] as i64, p[1] as i64, p[2] as i64];
            let mut j = nalgebra::Matrix3::<f64>::identity();
            for a in 0..3 {
                let ext = dims[a] as i64;
                let (mut lo, mut hi) = (p, p);
                let h = if p[a] == 0 {
                    hi[a] += 1;
                    1.0
                } else if p[a] == ext - 1 {
                    lo[a] -= 1;
                    1.0
                } else {
                    lo[a] -= 1;
                    hi[a] += 1;
                    2.0
                };
                for c in 0..3 {
                    j[(c, a)] += (get(c, hi) - get(c, lo)) / h;
                }
            }
            assert!((det.values()[i] - j.determinant()).abs() < 1e-12);
        }
    }

    #[test]
    fn sdlogj_matches_two_pass_oracle() {
        let phi = Deformation::from_displacement(smooth_field(&[14, 13], 1.5, 0.7, 30));
        let det = jacobian_determinant(&phi).unwrap();
        let vol = phi.grid().vol();
        let logs: Vec<f64> = vol
            .iter_coords()
            .zip(det.values())
            .filter(|(p, d)| vol.is_interior(*p, 1) && **d > 0.0)
            .map(|(_, d)| d.ln())
            .collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
        assert!((sdlogj(&phi).unwrap() - sd).abs() < 1e-10);
    }

    #[test]
    fn folding_ramp_is_fully_non_diffeomorphic() {
        let g = GridSpec::isotropic(&[12, 5]).unwrap();
        let u = VectorField::from_fn(g, |p| [-2.0 * p[0] as f64, 0.0, 0.0]).unwrap();
        let phi = Deformation::from_displacement(u);
        assert_eq!(ndv_percent(&phi).unwrap(), 100.0);
        assert!(matches!(sdlogj(&phi), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ndv_matches_brute_force_count() {
        let dims = [15, 14];
        let phi = Deformation::from_displacement(smooth_field(&dims, 0.8, 3.0, 12));
        let u = phi.displacement();
        let n = 15 * 14;
        let (mut bad, mut total) = (0, 0);
        for y in 1..13 {
            for x in 1..14 {
                let i = x + 15 * y;
                let dux_dx = u.values()[i + 1] - u.values()[i];
                let dux_dy = u.values()[i + 15] - u.values()[i];
                let duy_dx = u.values()[n + i + 1] - u.values()[n + i];
                let duy_dy = u.values()[n + i + 15] - u.values()[n + i];
                let det = (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx;
                total += 1;
                if det <= 0.0 {
                    bad += 1;
                }
            }
        }
        assert!(bad > 0, "amplitude should fold somewhere");
        let want = 100.0 * bad as f64 / total as f64;
        assert!((ndv_percent(&phi).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn jacobian_needs_three_voxels() {
        let phi = identity(GridSpec::isotropic(&[2, 5]).unwrap());
        assert!(matches!(jacobian_determinant(&phi), Err(Error::TooSmall(_))));
    }
}
