use super::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::Vol;

/// One contiguous run of voxels along x shared by an output row and the
/// input row it reads through a given kernel tap.
#[derive(Clone, Copy)]
struct Run {
    out: usize,
    inp: usize,
    len: usize,
}

/// Valid output range `[lo, hi)` along an axis of size `n` for tap offset `o`.
fn valid(n: usize, o: isize) -> (usize, usize) {
    let lo = (-o).max(0) as usize;
    let hi = (n as isize - o).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Runs for every kernel tap, with zero padding `(k - 1) / 2`.
fn tap_runs(vol: &Vol, k: usize) -> Vec<Vec<Run>> {
    let r = (k / 2) as isize;
    let (kz, rz) = if vol.ndim == 3 { (k, r) } else { (1, 0) };
    let mut all = Vec::with_capacity(kz * k * k);
    for dz in 0..kz {
        for dy in 0..k {
            for dx in 0..k {
                let (oz, oy, ox) = (dz as isize - rz, dy as isize - r, dx as isize - r);
                let (z0, z1) = valid(vol.nz, oz);
                let (y0, y1) = valid(vol.ny, oy);
                let (x0, x1) = valid(vol.nx, ox);
                let mut runs = Vec::new();
                if x1 > x0 {
                    for z in z0..z1 {
                        for y in y0..y1 {
                            let zi = (z as isize + oz) as usize;
                            let yi = (y as isize + oy) as usize;
                            let xi = (x0 as isize + ox) as usize;
                            runs.push(Run {
                                out: vol.index(x0, y, z),
                                inp: vol.index(xi, yi, zi),
                                len: x1 - x0,
                            });
                        }
                    }
                }
                all.push(runs);
            }
        }
    }
    all
}

#[inline]
fn axpy(dst: &mut [f64], w: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

struct ConvShape {
    cin: usize,
    cout: usize,
    k: usize,
    vol: Vol,
}

fn conv_shape(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<ConvShape> {
    let vol = x.vol()?;
    let cin = x.channels();
    let ws = w.shape();
    if ws.len() != 2 + vol.ndim {
        return Err(Error::Shape(format!(
            "conv weight of rank {} for a {}D input",
            ws.len(),
            vol.ndim
        )));
    }
    let k = ws[2];
    if ws[2..].iter().any(|&s| s != k) || k.is_multiple_of(2) {
        return Err(Error::Shape(format!("conv kernel must be odd and cubic, got {ws:?}")));
    }
    if ws[1] != cin {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {cin}",
            ws[1]
        )));
    }
    let cout = ws[0];
    if b.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv bias shape {:?} for {cout} output channels",
            b.shape()
        )));
    }
    Ok(ConvShape { cin, cout, k, vol })
}

fn taps_per_kernel(s: &ConvShape) -> usize {
    s.k.pow(s.vol.ndim as u32)
}

pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = conv_shape(x, w, b)?;
    let m = s.vol.len();
    let kk = taps_per_kernel(&s);
    let runs = tap_runs(&s.vol, s.k);
    let mut out = vec![0.0; s.cout * m];
    for co in 0..s.cout {
        out[co * m..(co + 1) * m].fill(b.data()[co]);
    }
    let (xd, wd) = (x.data(), w.data());
    for ci in 0..s.cin {
        let src = &xd[ci * m..(ci + 1) * m];
        for co in 0..s.cout {
            let dst = &mut out[co * m..(co + 1) * m];
            let wk = &wd[(co * s.cin + ci) * kk..(co * s.cin + ci + 1) * kk];
            for (t, tr) in runs.iter().enumerate() {
                let wv = wk[t];
                for r in tr {
                    axpy(&mut dst[r.out..r.out + r.len], wv, &src[r.inp..r.inp + r.len]);
                }
            }
        }
    }
    Tensor::new(Tensor::field_shape(s.cout, &s.vol), out)
}

struct Conv;

impl Backward for Conv {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let s = conv_shape(x, w, b).expect("validated in forward");
        let m = s.vol.len();
        let kk = taps_per_kernel(&s);
        let runs = tap_runs(&s.vol, s.k);
        let (xd, wd) = (x.data(), w.data());

        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; s.cin * m];
            for ci in 0..s.cin {
                let dst = &mut gx[ci * m..(ci + 1) * m];
                for co in 0..s.cout {
                    let go = &g[co * m..(co + 1) * m];
                    let wk = &wd[(co * s.cin + ci) * kk..(co * s.cin + ci + 1) * kk];
                    for (t, tr) in runs.iter().enumerate() {
                        let wv = wk[t];
                        for r in tr {
                            axpy(&mut dst[r.inp..r.inp + r.len], wv, &go[r.out..r.out + r.len]);
                        }
                    }
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; w.len()];
            for co in 0..s.cout {
                let go = &g[co * m..(co + 1) * m];
                for ci in 0..s.cin {
                    let src = &xd[ci * m..(ci + 1) * m];
                    for (t, tr) in runs.iter().enumerate() {
                        let mut acc = 0.0;
                        for r in tr {
                            acc += dot(&go[r.out..r.out + r.len], &src[r.inp..r.inp + r.len]);
                        }
                        gw[(co * s.cin + ci) * kk + t] = acc;
                    }
                }
            }
            gw
        });
        let gb = needs[2].then(|| {
            (0..s.cout)
                .map(|co| g[co * m..(co + 1) * m].iter().sum())
                .collect()
        });
        vec![gx, gw, gb]
    }
}

impl Tape {
    /// Stride-1 cross-correlation with zero padding `(k - 1) / 2`.
    ///
    /// `weight` is `[Cout, Cin, k, k]` in 2D and `[Cout, Cin, k, k, k]` in 3D.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = conv_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push_op(out, &[input, weight, bias], Box::new(Conv)))
    }
}
