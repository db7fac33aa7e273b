//! Seeded synthetic phantoms, random diffeomorphic warps and the
//! Horn-Schunck validity heatmap.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::deform::{self, Deformation, DEFAULT_SQUARING_STEPS};
use crate::error::{Error, Result};
use crate::grid::{gaussian_blur_field, sample_linear, spatial_gradient, FeatureMap, Field, GridSpec, ScalarField, VectorField};
use crate::net::{self, ModelParams};
use crate::objectives::{LabelMap, LandmarkSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    Square,
    Blobs,
    Rings,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(PhantomKind::Square),
            "blobs" => Ok(PhantomKind::Blobs),
            "rings" => Ok(PhantomKind::Rings),
            _ => Err(Error::Config(format!("unknown phantom kind '{s}' (square|blobs|rings)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomOptions {
    /// Number of foreground labels for the blobs and rings kinds.
    pub labels: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
    /// Blob radius range as fractions of the smallest grid dimension.
    pub blob_radius: (f64, f64),
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            labels: 4,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            blob_radius: (0.09, 0.16),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: ScalarField,
    pub labels: LabelMap,
    pub landmarks: LandmarkSet,
}

fn to_mm(grid: &GridSpec, voxel: &[f64]) -> Vec<f64> {
    voxel.iter().zip(grid.spacing()).map(|(v, s)| v * s).collect()
}

pub fn make_phantom(kind: PhantomKind, grid: &GridSpec, seed: u64) -> Result<Phantom> {
    make_phantom_with(kind, grid, seed, &PhantomOptions::default())
}

pub fn make_phantom_with(kind: PhantomKind, grid: &GridSpec, seed: u64, options: &PhantomOptions) -> Result<Phantom> {
    let min_dim = *grid.dims().iter().min().expect("grid has dims");
    if min_dim < 8 {
        return Err(Error::Config(format!("phantoms need every dim >= 8, got {:?}", grid.dims())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phantom = match kind {
        PhantomKind::Square => square(grid)?,
        PhantomKind::Blobs => blobs(grid, options, &mut rng)?,
        PhantomKind::Rings => rings(grid, options)?,
    };
    if kind != PhantomKind::Square && (options.noise_sigma > 0.0 || options.bias_amplitude > 0.0) {
        let phase: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let dims = grid.dims().to_vec();
        let vol = grid.vol();
        let mut values = phantom.image.values().to_vec();
        for (v, p) in values.iter_mut().zip(vol.iter_coords()) {
            let mut bias = 1.0;
            for a in 0..dims.len() {
                bias *= 1.0 + options.bias_amplitude * (PI * p[a] as f64 / dims[a] as f64 + phase[a]).sin() / dims.len() as f64;
            }
            let noise: f64 = rng.sample(StandardNormal);
            *v = *v * bias + options.noise_sigma * noise;
        }
        phantom.image = ScalarField::new(grid.clone(), values)?;
    }
    Ok(phantom)
}

fn square(grid: &GridSpec) -> Result<Phantom> {
    let dims = grid.dims().to_vec();
    let lo: Vec<usize> = dims.iter().map(|&n| n / 4).collect();
    let hi: Vec<usize> = dims.iter().map(|&n| 3 * n / 4).collect();
    let inside = |p: [usize; 3]| (0..dims.len()).all(|a| p[a] >= lo[a] && p[a] < hi[a]);
    let labels = LabelMap::from_fn(grid.clone(), |p| u16::from(inside(p)));
    let image = ScalarField::from_fn(grid.clone(), |p| if inside(p) { 1.0 } else { 0.0 })?;
    let d = dims.len();
    let mut pts = Vec::new();
    for corner in 0..(1usize << d) {
        let v: Vec<f64> = (0..d)
            .map(|a| if corner >> a & 1 == 1 { (hi[a] - 1) as f64 } else { lo[a] as f64 })
            .collect();
        pts.push(to_mm(grid, &v));
    }
    let center: Vec<f64> = (0..d).map(|a| (lo[a] + hi[a] - 1) as f64 / 2.0).collect();
    pts.push(to_mm(grid, &center));
    if d == 2 {
        for a in 0..2 {
            for end in [lo[a] as f64, (hi[a] - 1) as f64] {
                let mut v = center.clone();
                v[a] = end;
                pts.push(to_mm(grid, &v));
            }
        }
    }
    Ok(Phantom {
        image,
        labels,
        landmarks: LandmarkSet::new(pts)?,
    })
}

/// Smooth intensity modulation of one region.
fn region_texture(p: [usize; 3], dims: &[usize], phase: f64) -> f64 {
    let mut t = 0.0;
    for (a, &n) in dims.iter().enumerate() {
        t += (2.0 * PI * p[a] as f64 / n as f64 + phase * (a + 1) as f64).sin();
    }
    0.04 * t / dims.len() as f64
}

fn region_intensity(label: usize, count: usize) -> f64 {
    if label == 0 {
        0.1
    } else {
        0.35 + 0.6 * label as f64 / count as f64
    }
}

struct Blob {
    center: Vec<f64>,
    radii: Vec<f64>,
}

impl Blob {
    fn contains(&self, p: [usize; 3]) -> bool {
        self.center
            .iter()
            .zip(&self.radii)
            .enumerate()
            .map(|(a, (c, r))| ((p[a] as f64 - c) / r).powi(2))
            .sum::<f64>()
            < 1.0
    }
}

fn blobs(grid: &GridSpec, options: &PhantomOptions, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    let count = options.labels;
    if count < 3 {
        return Err(Error::Config(format!("blobs need at least 3 labels, got {count}")));
    }
    let dims = grid.dims().to_vec();
    let min_dim = *dims.iter().min().expect("dims") as f64;
    let (rmin, rmax) = (options.blob_radius.0 * min_dim, options.blob_radius.1 * min_dim);
    if !(rmin >= 1.0 && rmax > rmin) {
        return Err(Error::Config(format!(
            "blob radius range {:?} gives radii below one voxel or an empty range",
            options.blob_radius
        )));
    }
    let mut placed: Vec<Blob> = Vec::with_capacity(count);
    let mut tries = 0;
    while placed.len() < count {
        tries += 1;
        if tries > 20_000 {
            return Err(Error::Config(format!(
                "grid {:?} too small to place {count} separate blobs",
                dims
            )));
        }
        let r = rng.random_range(rmin..rmax);
        let radii: Vec<f64> = dims.iter().map(|_| r * rng.random_range(0.8..1.2)).collect();
        let center: Vec<f64> = dims
            .iter()
            .zip(&radii)
            .map(|(&n, &ra)| {
                let margin = ra + 2.0;
                rng.random_range(margin..(n as f64 - 1.0 - margin).max(margin + 1e-9))
            })
            .collect();
        let clear = placed.iter().all(|b| {
            let d2: f64 = b.center.iter().zip(&center).map(|(x, y)| (x - y).powi(2)).sum();
            let reach = b.radii.iter().cloned().fold(0.0, f64::max) + radii.iter().cloned().fold(0.0, f64::max) + 2.0;
            d2.sqrt() > reach
        });
        if clear {
            placed.push(Blob { center, radii });
        }
    }
    let label_at = |p: [usize; 3]| placed.iter().position(|b| b.contains(p)).map_or(0, |i| i + 1);
    let phases: Vec<f64> = (0..=count).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let labels = LabelMap::from_fn(grid.clone(), |p| label_at(p) as u16);
    let image = ScalarField::from_fn(grid.clone(), |p| {
        let l = label_at(p);
        region_intensity(l, count) + region_texture(p, &dims, phases[l])
    })?;
    let mut pts = Vec::with_capacity(3 * count);
    for b in &placed {
        pts.push(to_mm(grid, &b.center));
        for a in 0..2 {
            let mut v = b.center.clone();
            v[a] += b.radii[a];
            pts.push(to_mm(grid, &v));
        }
    }
    Ok(Phantom {
        image,
        labels,
        landmarks: LandmarkSet::new(pts)?,
    })
}

fn rings(grid: &GridSpec, options: &PhantomOptions) -> Result<Phantom> {
    let count = options.labels;
    if count == 0 {
        return Err(Error::Config("rings need at least 1 label".into()));
    }
    let dims = grid.dims().to_vec();
    let center: Vec<f64> = dims.iter().map(|&n| (n - 1) as f64 / 2.0).collect();
    let outer = 0.45 * *dims.iter().min().expect("dims") as f64;
    let width = outer / (count as f64 + 1.0);
    if width < 2.0 {
        return Err(Error::Config(format!("grid {:?} too small for {count} rings", dims)));
    }
    let label_at = |p: [usize; 3]| {
        let r = (0..dims.len()).map(|a| (p[a] as f64 - center[a]).powi(2)).sum::<f64>().sqrt();
        if r < width || r >= outer {
            0
        } else {
            ((r / width) as usize).min(count)
        }
    };
    let labels = LabelMap::from_fn(grid.clone(), |p| label_at(p) as u16);
    let image = ScalarField::from_fn(grid.clone(), |p| {
        let l = label_at(p);
        region_intensity(l, count) + region_texture(p, &dims, l as f64)
    })?;
    let mut pts = vec![to_mm(grid, &center)];
    for k in 1..=count {
        for (a, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
            let mut v = center.clone();
            v[a] += sign * k as f64 * width;
            pts.push(to_mm(grid, &v));
        }
    }
    Ok(Phantom {
        image,
        labels,
        landmarks: LandmarkSet::new(pts)?,
    })
}

/// A generated warp with its velocity and measured amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthWarp {
    pub svf: VectorField,
    pub phi: Deformation,
    /// Maximum displacement norm of `phi`, in voxels.
    pub d_max_actual: f64,
}

const DIFFEO_RETRIES: u64 = 5;

/// White noise blurred on a grid padded by the kernel radius and cropped
/// back, so that statistics do not change near the faces.
pub(crate) fn smooth_noise(grid: &GridSpec, sigma: f64, rng: &mut ChaCha8Rng) -> Result<VectorField> {
    let pad = (3.0 * sigma).ceil() as usize;
    let dims: Vec<usize> = grid.dims().iter().map(|d| d + 2 * pad).collect();
    let big = GridSpec::new(&dims, grid.spacing())?;
    let d = grid.ndim();
    let noise: Vec<f64> = (0..big.voxel_count() * d).map(|_| rng.sample(StandardNormal)).collect();
    let blurred = gaussian_blur_field(&VectorField::new(big.clone(), noise)?, sigma)?;
    let (bv, vol) = (big.vol(), grid.vol());
    let off = if d == 3 { [pad, pad, pad] } else { [pad, pad, 0] };
    let (n, bn) = (vol.len(), bv.len());
    let mut out = vec![0.0; n * d];
    for (i, p) in vol.iter_coords().enumerate() {
        let j = bv.index(p[0] + off[0], p[1] + off[1], p[2] + off[2]);
        for c in 0..d {
            out[c * n + i] = blurred.values()[c * bn + j];
        }
    }
    VectorField::new(grid.clone(), out)
}

/// Smoothed white-noise velocity rescaled so that its exponential reaches
/// between 0.9 and 1.0 times `target_dmax`.
pub fn random_diffeo(grid: &GridSpec, target_dmax: f64, sigma: f64, seed: u64) -> Result<GroundTruthWarp> {
    if !(target_dmax > 0.0 && target_dmax.is_finite()) {
        return Err(Error::InvalidArgument(format!("target_dmax must be > 0, got {target_dmax}")));
    }
    let lo = 0.9 * target_dmax;
    for attempt in 0..=DIFFEO_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let base = smooth_noise(grid, sigma, &mut rng)?;
        let norm = base.max_norm();
        if norm == 0.0 {
            continue;
        }
        let mut scale = 0.95 * target_dmax / norm;
        let mut found = None;
        for _ in 0..30 {
            let v = base.scaled(scale);
            let phi = deform::exp_svf(&v, DEFAULT_SQUARING_STEPS)?;
            let d = phi.displacement().max_norm();
            if (lo..=target_dmax).contains(&d) {
                found = Some((v, phi, d));
                break;
            }
            scale *= 0.95 * target_dmax / d;
        }
        let Some((svf, phi, d)) = found else { continue };
        if deform::ndv_percent(&phi)? == 0.0 && deform::min_interior_jacobian(&phi)? > 0.0 {
            return Ok(GroundTruthWarp {
                svf,
                phi,
                d_max_actual: d,
            });
        }
    }
    Err(Error::Generation(format!(
        "no fold-free warp with d_max {target_dmax} after {DIFFEO_RETRIES} retries (sigma {sigma})"
    )))
}

/// Inverse of `phi` at physical point `q`, by fixed-point iteration.
fn invert_point(phi: &Deformation, q: &[f64]) -> Result<Vec<f64>> {
    let grid = phi.grid();
    let sp = grid.spacing();
    let target: Vec<f64> = q.iter().zip(sp).map(|(x, s)| x / s).collect();
    let mut p = target.clone();
    for _ in 0..200 {
        let u = sample_linear(phi.displacement(), &p)?;
        let next: Vec<f64> = target.iter().zip(&u).map(|(t, ui)| t - ui).collect();
        let step = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        if step < 1e-12 {
            break;
        }
    }
    Ok(p.iter().zip(sp).map(|(v, s)| v * s).collect())
}

/// Builds a registration pair from `phantom` and a ground-truth warp.
///
/// The moving phantom is the input itself. The fixed image and labels are
/// the moving ones backward-warped through `phi`, so registering moving onto
/// fixed recovers `phi`. Fixed landmarks are the preimages of the moving
/// landmarks, which makes each moving landmark equal to its fixed landmark
/// displaced by `u` sampled there.
pub fn make_pair(phantom: &Phantom, warp: &GroundTruthWarp) -> Result<(Phantom, Phantom)> {
    phantom.image.grid().check_same(warp.phi.grid(), "make_pair")?;
    let image = deform::warp(&phantom.image, &warp.phi)?;
    let labels = phantom.labels.warp_nearest(&warp.phi)?;
    let pts = phantom
        .landmarks
        .points()
        .iter()
        .map(|q| invert_point(&warp.phi, q))
        .collect::<Result<Vec<_>>>()?;
    let fixed = Phantom {
        image,
        labels,
        landmarks: LandmarkSet::new(pts)?,
    };
    Ok((phantom.clone(), fixed))
}

/// Translation of `field` by `shift` voxels along `axis` (backward warp).
pub fn shifted(field: &ScalarField, axis: usize, shift: f64) -> Result<ScalarField> {
    let d = field.grid().ndim();
    if axis >= d {
        return Err(Error::InvalidArgument(format!("axis {axis} on a {d}D grid")));
    }
    let mut t = vec![0.0; d];
    t[axis] = shift;
    let phi = Deformation::from_displacement(VectorField::constant(field.grid().clone(), &t)?);
    deform::warp(field, &phi)
}

pub const DEFAULT_VALIDITY_THRESHOLD: f64 = 0.25;

/// Fraction of voxels where the single-axis Horn-Schunck estimate
/// `(I_m - I_f) / dI_f/d(axis)` lies within `threshold` of `known`.
///
/// 3D maps are averaged along z into a 2D map; 2D maps are returned as is.
pub fn hs_validity_map(moving: &ScalarField, fixed: &ScalarField, axis: usize, known: f64, threshold: f64) -> Result<ScalarField> {
    moving.grid().check_same(fixed.grid(), "hs_validity_map")?;
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be > 0, got {threshold}")));
    }
    let grid = fixed.grid();
    if axis >= grid.ndim() {
        return Err(Error::InvalidArgument(format!("axis {axis} on a {}D grid", grid.ndim())));
    }
    let grad = spatial_gradient(fixed)?;
    let g = grad.component(axis);
    let valid: Vec<f64> = moving
        .values()
        .iter()
        .zip(fixed.values())
        .zip(g)
        .map(|((m, f), &gv)| {
            if gv.abs() < 1e-6 {
                return 0.0;
            }
            let est = (m - f) / gv;
            if (est - known).abs() < threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if grid.ndim() == 2 {
        return ScalarField::new(grid.clone(), valid);
    }
    let vol = grid.vol();
    let plane = vol.nx * vol.ny;
    let mut out = vec![0.0; plane];
    for z in 0..vol.nz {
        for (o, v) in out.iter_mut().zip(&valid[z * plane..(z + 1) * plane]) {
            *o += v / vol.nz as f64;
        }
    }
    let g2 = GridSpec::new(&grid.dims()[..2], &grid.spacing()[..2])?;
    ScalarField::new(g2, out)
}

/// Mean validity of `image` against itself shifted by `shift` along `axis`.
pub fn shift_validity(image: &ScalarField, axis: usize, shift: f64, threshold: f64) -> Result<f64> {
    let moving = shifted(image, axis, shift)?;
    Ok(hs_validity_map(&moving, image, axis, shift, threshold)?.mean())
}

/// Validity map on encoder features: both feature maps are reduced to one
/// channel with the principal basis of `fixed`, then scored like intensities.
pub fn feature_validity_map(moving: &FeatureMap, fixed: &FeatureMap, axis: usize, known: f64, threshold: f64) -> Result<ScalarField> {
    let basis = pca_basis(fixed)?;
    hs_validity_map(&basis.project(moving)?, &basis.project(fixed)?, axis, known, threshold)
}

/// Mean feature-space validity of `image` against its shifted copy under the
/// encoder of `params`.
pub fn feature_shift_validity(image: &ScalarField, params: &ModelParams, axis: usize, shift: f64, threshold: f64) -> Result<f64> {
    let moving = net::encode(&shifted(image, axis, shift)?, params)?;
    let fixed = net::encode(image, params)?;
    Ok(feature_validity_map(&moving, &fixed, axis, shift, threshold)?.mean())
}

/// Leading principal direction of a feature map's channel covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Unit-norm loading per channel, largest-magnitude entry positive.
    pub component: Vec<f64>,
    pub eigenvalue: f64,
    /// Leading eigenvalue over the covariance trace.
    pub explained: f64,
}

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERATIONS: usize = 1000;

pub fn pca_basis(features: &FeatureMap) -> Result<PcaBasis> {
    let c = features.channels();
    if c < 2 {
        return Err(Error::InvalidArgument(format!("pca needs >= 2 channels, got {c}")));
    }
    let n = features.grid().voxel_count();
    let mean: Vec<f64> = (0..c).map(|k| features.channel(k).iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let (a, b) = (features.channel(i), features.channel(j));
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - mean[i]) * (y - mean[j])).sum::<f64>() / n as f64;
            cov[i * c + j] = s;
            cov[j * c + i] = s;
        }
    }
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    let col_norm = |j: usize| (0..c).map(|i| cov[i * c + j].powi(2)).sum::<f64>();
    let start = (0..c).fold(0, |best, j| if col_norm(j) > col_norm(best) { j } else { best });
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v: Vec<f64> = (0..c).map(|i| cov[i * c + start]).collect();
    let nv = norm(&v);
    if nv == 0.0 {
        return Err(Error::DegenerateVariance("pca of constant features".into()));
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let mut converged = false;
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut w: Vec<f64> = (0..c).map(|i| (0..c).map(|j| cov[i * c + j] * v[j]).sum()).collect();
        let nw = norm(&w);
        w.iter_mut().for_each(|x| *x /= nw);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < PCA_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical {
            iterations: PCA_MAX_ITERATIONS,
            reason: "power iteration did not converge".into(),
        });
    }
    let lead = (0..c).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let eigenvalue: f64 = (0..c).map(|i| v[i] * (0..c).map(|j| cov[i * c + j] * v[j]).sum::<f64>()).sum();
    Ok(PcaBasis {
        mean,
        component: v,
        eigenvalue,
        explained: if trace > 0.0 { eigenvalue / trace } else { 0.0 },
    })
}

impl PcaBasis {
    /// Projection of each voxel's centred channel vector onto the component.
    pub fn project(&self, features: &FeatureMap) -> Result<ScalarField> {
        let c = features.channels();
        if c != self.component.len() {
            return Err(Error::Shape(format!(
                "pca basis has {} channels, features {c}",
                self.component.len()
            )));
        }
        let n = features.grid().voxel_count();
        let mut out = vec![0.0; n];
        for k in 0..c {
            let (w, m) = (self.component[k], self.mean[k]);
            for (o, x) in out.iter_mut().zip(features.channel(k)) {
                *o += w * (x - m);
            }
        }
        ScalarField::new(features.grid().clone(), out)
    }
}

pub fn pca_first_component(features: &FeatureMap) -> Result<ScalarField> {
    pca_basis(features)?.project(features)
}
