use super::{LabelMap, LossConfig, Similarity};
use crate::autodiff::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{resize_linear, Field, ScalarField, Vol};

const VARIANCE_FLOOR: f64 = 1e-5;
const DICE_EPS: f64 = 1e-5;

/// Deep-supervision weight `1 / 2^(l-1)` for levels `1..=n`.
pub fn level_weights(levels: usize) -> Vec<f64> {
    (0..levels).map(|l| 1.0 / (1u64 << l) as f64).collect()
}

/// Sum over the axis-aligned box of half-width `r` around every voxel,
/// truncated at the grid faces.
pub fn box_sum(data: &[f64], vol: &Vol, r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut prefix = Vec::new();
    for axis in 0..vol.ndim {
        let n = vol.extent(axis);
        let stride = vol.stride(axis);
        let mut out = vec![0.0; cur.len()];
        for start in line_starts(vol, axis) {
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for k in 0..n {
                acc += cur[start + k * stride];
                prefix.push(acc);
            }
            for k in 0..n {
                let lo = k.saturating_sub(r);
                let hi = (k + r).min(n - 1) + 1;
                out[start + k * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = out;
    }
    cur
}

fn line_starts(vol: &Vol, axis: usize) -> Vec<usize> {
    let ext = vol.extents();
    let mut starts = Vec::with_capacity(vol.len() / ext[axis]);
    for z in 0..if axis == 2 { 1 } else { ext[2] } {
        for y in 0..if axis == 1 { 1 } else { ext[1] } {
            for x in 0..if axis == 0 { 1 } else { ext[0] } {
                starts.push(vol.index(x, y, z));
            }
        }
    }
    starts
}

fn window_counts(vol: &Vol, r: usize) -> Vec<f64> {
    let ext = vol.extents();
    let along = |k: usize, n: usize| ((k + r).min(n - 1) + 1 - k.saturating_sub(r)) as f64;
    vol.iter_coords()
        .map(|p| (0..vol.ndim).map(|a| along(p[a], ext[a])).product())
        .collect()
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Per-window moments of one channel pair.
struct Moments {
    n: Vec<f64>,
    si: Vec<f64>,
    sj: Vec<f64>,
    sii: Vec<f64>,
    sjj: Vec<f64>,
    sij: Vec<f64>,
}

impl Moments {
    fn new(i: &[f64], j: &[f64], vol: &Vol, r: usize) -> Self {
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
        Moments {
            n: window_counts(vol, r),
            si: box_sum(i, vol, r),
            sj: box_sum(j, vol, r),
            sii: box_sum(&prod(i, i), vol, r),
            sjj: box_sum(&prod(j, j), vol, r),
            sij: box_sum(&prod(i, j), vol, r),
        }
    }

    /// `(cov, var_i, var_j)` at voxel `p`, variances before flooring.
    fn at(&self, p: usize) -> (f64, f64, f64) {
        let n = self.n[p];
        let (mi, mj) = (self.si[p] / n, self.sj[p] / n);
        (
            self.sij[p] / n - mi * mj,
            self.sii[p] / n - mi * mi,
            self.sjj[p] / n - mj * mj,
        )
    }
}

struct Ncc {
    r: usize,
}

impl Backward for Ncc {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let vol = a.vol().expect("validated in forward");
        let n = vol.len();
        let scale = -g[0] / a.len() as f64;
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for c in 0..a.channels() {
            let (i, j) = (&a.data()[c * n..(c + 1) * n], &b.data()[c * n..(c + 1) * n]);
            let m = Moments::new(i, j, &vol, self.r);
            let mut k = [
                vec![0.0; n],
                vec![0.0; n],
                vec![0.0; n],
                vec![0.0; n],
                vec![0.0; n],
            ];
            for p in 0..n {
                let (cov, vi, vj) = m.at(p);
                let (fa, fb) = (vi.max(VARIANCE_FLOOR), vj.max(VARIANCE_FLOOR));
                let np = m.n[p];
                let base = 2.0 * cov / (fa * fb);
                let cc2 = cov * cov / (fa * fb);
                let da = if vi > VARIANCE_FLOOR { cc2 / fa } else { 0.0 };
                let db = if vj > VARIANCE_FLOOR { cc2 / fb } else { 0.0 };
                let (mi, mj) = (m.si[p] / np, m.sj[p] / np);
                // coefficients of SI, SJ, SII, SJJ, SIJ
                k[0][p] = (-base * mj + da * 2.0 * mi) / np;
                k[1][p] = (-base * mi + db * 2.0 * mj) / np;
                k[2][p] = -da / np;
                k[3][p] = -db / np;
                k[4][p] = base / np;
            }
            let [ki, kj, kii, kjj, kij] = k.map(|f| box_sum(&f, &vol, self.r));
            if let Some(ga) = ga.as_mut() {
                for p in 0..n {
                    ga[c * n + p] = scale * (ki[p] + 2.0 * i[p] * kii[p] + j[p] * kij[p]);
                }
            }
            if let Some(gb) = gb.as_mut() {
                for p in 0..n {
                    gb[c * n + p] = scale * (kj[p] + 2.0 * j[p] * kjj[p] + i[p] * kij[p]);
                }
            }
        }
        vec![ga, gb]
    }
}

/// `1 - mean(cc^2)` with `cc` the local correlation coefficient over a
/// `window`-wide box, variances floored at 1e-5.
pub fn ncc_loss(tape: &mut Tape, warped: Var, fixed: Var, window: usize) -> Result<Var> {
    same_shape(tape, warped, fixed, "ncc")?;
    let (a, b) = (tape.value(warped), tape.value(fixed));
    let vol = a.vol()?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("ncc window must be odd, got {window}")));
    }
    if vol.dims().iter().any(|&d| d < window) {
        return Err(Error::Config(format!(
            "ncc window {window} exceeds grid {:?}",
            vol.dims()
        )));
    }
    let r = window / 2;
    let n = vol.len();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let m = Moments::new(&a.data()[c * n..(c + 1) * n], &b.data()[c * n..(c + 1) * n], &vol, r);
        for p in 0..n {
            let (cov, vi, vj) = m.at(p);
            total += cov * cov / (vi.max(VARIANCE_FLOOR) * vj.max(VARIANCE_FLOOR));
        }
    }
    let loss = 1.0 - total / a.len() as f64;
    Ok(tape.push_op(Tensor::scalar(loss), &[warped, fixed], Box::new(Ncc { r })))
}

struct Mse;

impl Backward for Mse {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let k = 2.0 * g[0] / inputs[0].len() as f64;
        let d: Vec<f64> = inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| k * (a - b)).collect();
        vec![
            needs[0].then(|| d.clone()),
            needs[1].then(|| d.iter().map(|v| -v).collect()),
        ]
    }
}

pub fn mse_loss(tape: &mut Tape, warped: Var, fixed: Var) -> Result<Var> {
    same_shape(tape, warped, fixed, "mse")?;
    let (a, b) = (tape.value(warped), tape.value(fixed));
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let loss = s / a.len() as f64;
    Ok(tape.push_op(Tensor::scalar(loss), &[warped, fixed], Box::new(Mse)))
}

struct SoftDice;

fn dice_sums(p: &[f64], q: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + q.iter().sum::<f64>();
    (inter, total)
}

impl Backward for SoftDice {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (p, q) = (inputs[0], inputs[1]);
        let l = p.channels();
        let n = p.len() / l;
        let mut gp = needs[0].then(|| vec![0.0; p.len()]);
        let mut gq = needs[1].then(|| vec![0.0; q.len()]);
        for c in 0..l {
            let (pc, qc) = (&p.data()[c * n..(c + 1) * n], &q.data()[c * n..(c + 1) * n]);
            let (inter, total) = dice_sums(pc, qc);
            let s = total + DICE_EPS;
            let ratio = (2.0 * inter + DICE_EPS) / (s * s);
            let k = -g[0] / l as f64;
            if let Some(gp) = gp.as_mut() {
                for i in 0..n {
                    gp[c * n + i] = k * (2.0 * qc[i] / s - ratio);
                }
            }
            if let Some(gq) = gq.as_mut() {
                for i in 0..n {
                    gq[c * n + i] = k * (2.0 * pc[i] / s - ratio);
                }
            }
        }
        vec![gp, gq]
    }
}

/// `1 - mean_l (2 sum(pq) + eps) / (sum(p) + sum(q) + eps)` over label
/// channels.
pub fn soft_dice_loss(tape: &mut Tape, warped_onehot: Var, fixed_onehot: Var) -> Result<Var> {
    same_shape(tape, warped_onehot, fixed_onehot, "soft dice")?;
    let (p, q) = (tape.value(warped_onehot), tape.value(fixed_onehot));
    p.vol()?;
    let l = p.channels();
    let n = p.len() / l;
    let mut acc = 0.0;
    for c in 0..l {
        let (inter, total) = dice_sums(&p.data()[c * n..(c + 1) * n], &q.data()[c * n..(c + 1) * n]);
        acc += (2.0 * inter + DICE_EPS) / (total + DICE_EPS);
    }
    let loss = 1.0 - acc / l as f64;
    Ok(tape.push_op(Tensor::scalar(loss), &[warped_onehot, fixed_onehot], Box::new(SoftDice)))
}

struct Smoothness;

/// Calls `f(axis, lo, hi, weight)` for every forward-difference pair, where
/// `weight` is the reciprocal of that axis' pair count.
fn for_each_difference(u: &Tensor, mut f: impl FnMut(usize, usize, f64)) {
    let vol = u.vol().expect("validated in forward");
    let n = vol.len();
    let c = u.channels();
    for axis in 0..vol.ndim {
        let ext = vol.extent(axis);
        let stride = vol.stride(axis);
        let weight = 1.0 / (c * n / ext * (ext - 1)) as f64;
        for ch in 0..c {
            for (i, p) in vol.iter_coords().enumerate() {
                if p[axis] + 1 < ext {
                    f(ch * n + i, ch * n + i + stride, weight);
                }
            }
        }
    }
}

impl Backward for Smoothness {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let u = inputs[0];
        let d = u.data();
        let mut gu = vec![0.0; d.len()];
        for_each_difference(u, |lo, hi, w| {
            let k = 2.0 * g[0] * w * (d[hi] - d[lo]);
            gu[hi] += k;
            gu[lo] -= k;
        });
        vec![Some(gu)]
    }
}

/// Sum over axes of the mean squared forward difference along that axis,
/// averaged over components and valid voxels.
pub fn smoothness(tape: &mut Tape, u: Var) -> Result<Var> {
    let t = tape.value(u);
    let vol = t.vol()?;
    if vol.dims().iter().any(|&d| d < 2) {
        return Err(Error::TooSmall(format!("smoothness on {:?}", vol.dims())));
    }
    let d = t.data();
    let mut r = 0.0;
    for_each_difference(t, |lo, hi, w| r += w * (d[hi] - d[lo]).powi(2));
    Ok(tape.push_op(Tensor::scalar(r), &[u], Box::new(Smoothness)))
}

/// Moving and fixed label maps for the semi-supervised Dice term.
#[derive(Debug, Clone, Copy)]
pub struct LabelPair<'a> {
    pub moving: &'a LabelMap,
    pub fixed: &'a LabelMap,
}

/// Total loss node plus its unweighted per-level parts.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    /// Similarity `s` at each level, finest first.
    pub similarity: Vec<f64>,
    /// Regularizer `r(u_l)` at each level, finest first.
    pub smoothness: Vec<f64>,
    pub dice: Option<f64>,
}

impl LossTerms {
    pub fn weighted_similarity(&self) -> f64 {
        self.similarity.iter().zip(level_weights(self.similarity.len())).map(|(s, w)| s * w).sum()
    }

    pub fn weighted_smoothness(&self) -> f64 {
        self.smoothness.iter().zip(level_weights(self.smoothness.len())).map(|(s, w)| s * w).sum()
    }
}

fn largest_odd_at_most(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n - 1
    }
}

/// Deep-supervised objective over a registration pyramid.
///
/// `phis[l]` and `residuals[l]` are the level-`l+1` composed displacement
/// and residual velocity, finest first. At each level the images are
/// downsampled to that level's grid. The NCC window is reduced at levels
/// whose smallest dimension cannot hold it.
pub fn deep_supervised_loss(
    tape: &mut Tape,
    phis: &[Var],
    residuals: &[Var],
    moving: &ScalarField,
    fixed: &ScalarField,
    labels: Option<LabelPair<'_>>,
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let n = config.levels;
    if phis.len() != n || residuals.len() != n {
        return Err(Error::Shape(format!(
            "loss over {n} levels given {} deformations and {} residuals",
            phis.len(),
            residuals.len()
        )));
    }
    moving.grid().check_same(fixed.grid(), "loss images")?;
    let weights = level_weights(n);
    let (mut im, mut ifx) = (moving.clone(), fixed.clone());
    let mut terms = Vec::with_capacity(2 * n + 1);
    let (mut sims, mut regs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for l in 0..n {
        if l > 0 {
            im = resize_linear(&im, 0.5)?;
            ifx = resize_linear(&ifx, 0.5)?;
        }
        let vol = tape.value(phis[l]).vol()?;
        if vol.dims() != im.grid().dims() {
            return Err(Error::Shape(format!(
                "level {} deformation {:?} vs image {:?}",
                l + 1,
                vol.dims(),
                im.grid().dims()
            )));
        }
        let mv = tape.constant(Tensor::from_field(&im));
        let fv = tape.constant(Tensor::from_field(&ifx));
        let warped = tape.warp(mv, phis[l])?;
        let sim = match config.similarity {
            Similarity::Ncc => {
                let min_dim = *vol.dims().iter().min().expect("non-empty");
                let w = config.ncc_window.min(largest_odd_at_most(min_dim));
                ncc_loss(tape, warped, fv, w)?
            }
            Similarity::Mse => mse_loss(tape, warped, fv)?,
        };
        let reg = smoothness(tape, residuals[l])?;
        sims.push(tape.value(sim).item());
        regs.push(tape.value(reg).item());
        terms.push((sim, weights[l]));
        terms.push((reg, weights[l] * config.lambda));
    }
    let mut dice = None;
    if let Some(pair) = labels.filter(|_| config.dice_weight > 0.0) {
        pair.moving.grid().check_same(moving.grid(), "moving labels")?;
        pair.fixed.grid().check_same(fixed.grid(), "fixed labels")?;
        let mut set = pair.moving.foreground_labels();
        set.extend(pair.fixed.foreground_labels());
        set.sort_unstable();
        set.dedup();
        if !set.is_empty() {
            let mo = tape.constant(pair.moving.one_hot(&set)?);
            let fo = tape.constant(pair.fixed.one_hot(&set)?);
            let wo = tape.warp(mo, phis[0])?;
            let d = soft_dice_loss(tape, wo, fo)?;
            dice = Some(tape.value(d).item());
            terms.push((d, config.dice_weight));
        }
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(LossTerms {
        total,
        similarity: sims,
        smoothness: regs,
        dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn brute_ncc(a: &Tensor, b: &Tensor, w: usize) -> f64 {
        let vol = a.vol().unwrap();
        let r = w as isize / 2;
        let ext = vol.extents();
        let mut acc = 0.0;
        for p in vol.iter_coords() {
            let mut pts = Vec::new();
            for q in vol.iter_coords() {
                if (0..vol.ndim).all(|k| (q[k] as isize - p[k] as isize).abs() <= r) {
                    pts.push(vol.index(q[0], q[1], q[2]));
                }
            }
            let _ = ext;
            let n = pts.len() as f64;
            let mi = pts.iter().map(|&i| a.data()[i]).sum::<f64>() / n;
            let mj = pts.iter().map(|&i| b.data()[i]).sum::<f64>() / n;
            let cov = pts.iter().map(|&i| (a.data()[i] - mi) * (b.data()[i] - mj)).sum::<f64>() / n;
            let vi = pts.iter().map(|&i| (a.data()[i] - mi).powi(2)).sum::<f64>() / n;
            let vj = pts.iter().map(|&i| (b.data()[i] - mj).powi(2)).sum::<f64>() / n;
            acc += cov * cov / (vi.max(1e-5) * vj.max(1e-5));
        }
        1.0 - acc / vol.len() as f64
    }

    #[test]
    fn box_sum_counts() {
        let vol = Vol::from_dims(&[5, 4]);
        let ones = vec![1.0; 20];
        assert_eq!(box_sum(&ones, &vol, 1), window_counts(&vol, 1));
        assert_eq!(box_sum(&ones, &vol, 1)[0], 4.0);
        assert_eq!(box_sum(&ones, &vol, 1)[6], 9.0);
    }

    #[test]
    fn ncc_matches_brute_force() {
        for (shape, w) in [(vec![1, 7, 9], 3), (vec![1, 5, 6, 7], 5)] {
            let a = random(shape.clone(), 1);
            let b = random(shape, 2);
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let l = ncc_loss(&mut tape, va, vb, w).unwrap();
            assert!((tape.value(l).item() - brute_ncc(&a, &b, w)).abs() < 1e-8);
        }
    }

    #[test]
    fn ncc_identical_and_affine() {
        let a = random(vec![1, 10, 12], 3);
        let affine = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| 2.5 * v - 0.7).collect()).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(a));
        let l = ncc_loss(&mut tape, va, vb, 5).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        let vc = tape.constant(affine);
        let l = ncc_loss(&mut tape, vc, vb, 5).unwrap();
        assert!(tape.value(l).item().abs() < 1e-10);
    }

    #[test]
    fn ncc_window_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 4, 8]));
        assert!(matches!(ncc_loss(&mut tape, a, a, 5), Err(Error::Config(_))));
        assert!(matches!(ncc_loss(&mut tape, a, a, 2), Err(Error::Config(_))));
    }

    #[test]
    fn ncc_gradient() {
        let a = random(vec![1, 6, 7], 4);
        let b = random(vec![1, 6, 7], 5);
        let r = gradient_check(|t, v| ncc_loss(t, v[0], v[1], 3), &[a, b], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2, 2], vec![3.0; 4]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap());
        let l = mse_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        let r = gradient_check(|t, v| mse_loss(t, v[0], v[1]), &[random(vec![1, 3, 3], 6), random(vec![1, 3, 3], 7)], 1e-5)
            .unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn soft_dice_counting_oracle() {
        let g = GridSpec::isotropic(&[10, 10]).unwrap();
        let a = LabelMap::from_fn(g.clone(), |p| u16::from((2..6).contains(&p[0]) && (2..6).contains(&p[1])));
        let b = LabelMap::from_fn(g, |p| u16::from((4..8).contains(&p[0]) && (2..6).contains(&p[1])));
        let mut tape = Tape::new();
        let pa = tape.constant(a.one_hot(&[1]).unwrap());
        let pb = tape.constant(b.one_hot(&[1]).unwrap());
        let l = soft_dice_loss(&mut tape, pa, pb).unwrap();
        let want = 1.0 - (2.0 * 8.0 + 1e-5) / (32.0 + 1e-5);
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        let same = soft_dice_loss(&mut tape, pa, pa).unwrap();
        assert!(tape.value(same).item().abs() < 1e-12);
        let r = gradient_check(
            |t, v| soft_dice_loss(t, v[0], v[1]),
            &[random(vec![2, 3, 4], 8), random(vec![2, 3, 4], 9)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn smoothness_ramp_and_gradient() {
        let mut tape = Tape::new();
        let mut d = vec![0.0; 2 * 20];
        for i in 0..20 {
            d[i] = (i % 5) as f64;
        }
        let u = tape.constant(Tensor::new(vec![2, 4, 5], d).unwrap());
        let r = smoothness(&mut tape, u).unwrap();
        assert!((tape.value(r).item() - 0.5).abs() < 1e-14);
        let c = tape.constant(Tensor::new(vec![2, 4, 5], vec![1.5; 40]).unwrap());
        let r = smoothness(&mut tape, c).unwrap();
        assert_eq!(tape.value(r).item(), 0.0);
        let rep = gradient_check(|t, v| smoothness(t, v[0]), &[random(vec![3, 3, 4, 3], 10)], 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-8);
    }

    #[test]
    fn smoothness_stencil_oracle() {
        let u = random(vec![2, 5, 6], 11);
        let mut tape = Tape::new();
        let v = tape.constant(u.clone());
        let r = smoothness(&mut tape, v).unwrap();
        let at = |c: usize, y: usize, x: usize| u.data()[c * 30 + y * 6 + x];
        let (mut sx, mut sy) = (0.0, 0.0);
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..6 {
                    if x < 5 {
                        sx += (at(c, y, x + 1) - at(c, y, x)).powi(2);
                    }
                    if y < 4 {
                        sy += (at(c, y + 1, x) - at(c, y, x)).powi(2);
                    }
                }
            }
        }
        let want = sx / 50.0 + sy / 48.0;
        assert!((tape.value(r).item() - want).abs() < 1e-12);
    }

    #[test]
    fn weights() {
        assert_eq!(level_weights(5), vec![1.0, 0.5, 0.25, 0.125, 0.0625]);
    }
}
