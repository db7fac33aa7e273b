use super::{LabelMap, LandmarkSet};
use crate::deform::Deformation;
use crate::error::{Error, Result};
use crate::grid::{sample_linear, GridSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// `(label, dice)` for every foreground label present in either map.
    pub per_label: Vec<(u16, f64)>,
    pub mean: f64,
}

fn union_labels(a: &LabelMap, b: &LabelMap) -> Vec<u16> {
    let mut set = a.foreground_labels();
    set.extend(b.foreground_labels());
    set.sort_unstable();
    set.dedup();
    set
}

/// Per-label `2|A∩B| / (|A| + |B|)` over foreground labels.
pub fn dice_metric(warped: &LabelMap, fixed: &LabelMap) -> Result<DiceReport> {
    warped.grid().check_same(fixed.grid(), "dice")?;
    let labels = union_labels(warped, fixed);
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("dice: no foreground labels in either map".into()));
    }
    let per_label: Vec<(u16, f64)> = labels
        .iter()
        .map(|&l| {
            let (mut inter, mut total) = (0usize, 0usize);
            for (&a, &b) in warped.labels().iter().zip(fixed.labels()) {
                inter += usize::from(a == l && b == l);
                total += usize::from(a == l) + usize::from(b == l);
            }
            (l, 2.0 * inter as f64 / total as f64)
        })
        .collect();
    let mean = per_label.iter().map(|(_, d)| d).sum::<f64>() / per_label.len() as f64;
    Ok(DiceReport { per_label, mean })
}

/// Voxels of `mask` with a face neighbour outside the mask or the grid.
pub fn boundary_mask(mask: &[bool], grid: &GridSpec) -> Vec<bool> {
    let vol = grid.vol();
    let ext = vol.extents();
    vol.iter_coords()
        .enumerate()
        .map(|(i, p)| {
            mask[i]
                && (0..vol.ndim).any(|a| {
                    let s = vol.stride(a);
                    p[a] == 0 || p[a] + 1 == ext[a] || !mask[i - s] || !mask[i + s]
                })
        })
        .collect()
}

/// Squared 1D distance transform of sampled function `f` at spacing `s`.
fn dt1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let xq = s * q as f64;
        let mut cross = f64::NEG_INFINITY;
        while let Some(&top) = v.last() {
            let xv = s * top as f64;
            cross = ((fq + xq * xq) - (f[top] + xv * xv)) / (2.0 * (xq - xv));
            if cross <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
                cross = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(cross);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let xp = s * p as f64;
        while k + 1 < v.len() && z[k + 1] < xp {
            k += 1;
        }
        let d = xp - s * v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance (physical units) from every voxel to the nearest
/// voxel where `mask` is set; infinite when the mask is empty.
pub fn distance_transform(mask: &[bool], grid: &GridSpec) -> Vec<f64> {
    let vol = grid.vol();
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let (mut line, mut out) = (Vec::new(), Vec::new());
    let ext = vol.extents();
    for axis in 0..vol.ndim {
        let n = ext[axis];
        let stride = vol.stride(axis);
        let s = grid.spacing()[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for (i, p) in vol.iter_coords().enumerate() {
            if p[axis] != 0 {
                continue;
            }
            for k in 0..n {
                line[k] = d[i + k * stride];
            }
            dt1d(&line, s, &mut out, &mut v, &mut z);
            for k in 0..n {
                d[i + k * stride] = out[k];
            }
        }
    }
    d.iter().map(|x| x.sqrt()).collect()
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// 95th percentile of symmetric boundary-to-boundary distances for `label`,
/// in the physical units of the grid spacing.
pub fn hd95(warped: &LabelMap, fixed: &LabelMap, label: u16) -> Result<f64> {
    warped.grid().check_same(fixed.grid(), "hd95")?;
    let grid = fixed.grid();
    let a: Vec<bool> = warped.labels().iter().map(|&l| l == label).collect();
    let b: Vec<bool> = fixed.labels().iter().map(|&l| l == label).collect();
    if !a.contains(&true) || !b.contains(&true) {
        return Err(Error::UndefinedMetric(format!("hd95: label {label} is empty")));
    }
    let (ba, bb) = (boundary_mask(&a, grid), boundary_mask(&b, grid));
    let (da, db) = (distance_transform(&ba, grid), distance_transform(&bb, grid));
    let mut dists: Vec<f64> = ba.iter().zip(&db).filter(|(&m, _)| m).map(|(_, &d)| d).collect();
    dists.extend(bb.iter().zip(&da).filter(|(&m, _)| m).map(|(_, &d)| d));
    percentile(&dists, 95.0)
}

/// `hd95` for every foreground label present in both maps, with their mean.
pub fn hd95_report(warped: &LabelMap, fixed: &LabelMap) -> Result<(Vec<(u16, f64)>, f64)> {
    let fw = warped.foreground_labels();
    let per: Vec<(u16, f64)> = fixed
        .foreground_labels()
        .into_iter()
        .filter(|l| fw.contains(l))
        .map(|l| hd95(warped, fixed, l).map(|d| (l, d)))
        .collect::<Result<_>>()?;
    if per.is_empty() {
        return Err(Error::UndefinedMetric("hd95: no label shared by both maps".into()));
    }
    let mean = per.iter().map(|(_, d)| d).sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Mean distance (mm) between moving landmarks and fixed landmarks mapped
/// through `phi`, i.e. `q + u(q / spacing) * spacing`.
pub fn tre(phi: &Deformation, fixed_pts: &LandmarkSet, moving_pts: &LandmarkSet) -> Result<f64> {
    if fixed_pts.len() != moving_pts.len() {
        return Err(Error::InvalidArgument(format!(
            "tre: {} fixed vs {} moving landmarks",
            fixed_pts.len(),
            moving_pts.len()
        )));
    }
    if fixed_pts.is_empty() {
        return Err(Error::UndefinedMetric("tre of an empty landmark set".into()));
    }
    let grid = phi.grid();
    let d = grid.ndim();
    let spacing = grid.spacing();
    let mut total = 0.0;
    for (q, m) in fixed_pts.points().iter().zip(moving_pts.points()) {
        if q.len() != d || m.len() != d {
            return Err(Error::InvalidArgument(format!("tre: landmark is not {d}D")));
        }
        let voxel: Vec<f64> = q.iter().zip(spacing).map(|(x, s)| x / s).collect();
        let u = sample_linear(phi.displacement(), &voxel)?;
        let dist2: f64 = (0..d).map(|a| (q[a] + u[a] * spacing[a] - m[a]).powi(2)).sum();
        total += dist2.sqrt();
    }
    Ok(total / fixed_pts.len() as f64)
}
