//! Interpolation kernels shared by the plain field API and the
//! differentiable tensor ops, so both follow one sampling rule.

/// Grid extents as `(nx, ny, nz)`; 2D grids carry `nz = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vol {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub ndim: usize,
}

impl Vol {
    pub fn from_dims(dims: &[usize]) -> Self {
        debug_assert!((2..=3).contains(&dims.len()));
        Vol {
            nx: dims[0],
            ny: dims[1],
            nz: if dims.len() == 3 { dims[2] } else { 1 },
            ndim: dims.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self, axis: usize) -> usize {
        [self.nx, self.ny, self.nz][axis]
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn stride(&self, axis: usize) -> usize {
        [1, self.nx, self.nx * self.ny][axis]
    }

    pub fn dims(&self) -> Vec<usize> {
        self.extents()[..self.ndim].to_vec()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Voxel coordinates in storage order.
    pub fn iter_coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
    }

    /// `true` when the voxel is at least `margin` voxels away from every face.
    pub fn is_interior(&self, p: [usize; 3], margin: usize) -> bool {
        (0..self.ndim).all(|a| {
            let n = self.extent(a);
            p[a] >= margin && p[a] + margin < n
        })
    }
}

/// Corner indices and weights for one multi-linear sample.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// `dw[a][k]` is the derivative of corner weight `k` with respect to the
    /// sample coordinate along axis `a` (zero where the coordinate was clamped).
    pub dw: [[f64; 8]; 3],
    pub n: usize,
}

impl Stencil {
    #[inline]
    pub fn new(vol: &Vol, p: [f64; 3]) -> Self {
        let ext = vol.extents();
        let mut lo = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut live = [0.0f64; 3];
        for a in 0..vol.ndim {
            let n = ext[a];
            let hi = (n - 1) as f64;
            let x = p[a];
            let c = if x < 0.0 {
                0.0
            } else if x > hi {
                hi
            } else {
                live[a] = 1.0;
                x
            };
            let i0 = (c.floor() as usize).min(n - 2);
            lo[a] = i0;
            frac[a] = c - i0 as f64;
        }
        let strides = [1, vol.nx, vol.nx * vol.ny];
        let n = 1usize << vol.ndim;
        let mut st = Stencil {
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 8]; 3],
            n,
        };
        for k in 0..n {
            let mut idx = 0;
            let mut f = [0.0f64; 3];
            let mut sign = [0.0f64; 3];
            for a in 0..vol.ndim {
                let bit = (k >> a) & 1;
                idx += (lo[a] + bit) * strides[a];
                if bit == 1 {
                    f[a] = frac[a];
                    sign[a] = 1.0;
                } else {
                    f[a] = 1.0 - frac[a];
                    sign[a] = -1.0;
                }
            }
            st.idx[k] = idx;
            let mut w = 1.0;
            for fa in f.iter().take(vol.ndim) {
                w *= fa;
            }
            st.w[k] = w;
            for a in 0..vol.ndim {
                let mut d = sign[a] * live[a];
                for (b, fb) in f.iter().enumerate().take(vol.ndim) {
                    if b != a {
                        d *= fb;
                    }
                }
                st.dw[a][k] = d;
            }
        }
        st
    }

    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.n {
            s += self.w[k] * data[self.idx[k]];
        }
        s
    }

    /// Derivative of the sample with respect to the coordinate along `axis`.
    #[inline]
    pub fn apply_d(&self, data: &[f64], axis: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..self.n {
            s += self.dw[axis][k] * data[self.idx[k]];
        }
        s
    }
}

/// Align-corners source position of output index `i`.
#[inline]
fn source_pos(i: usize, n_in: usize, n_out: usize) -> (usize, f64) {
    let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let i0 = (s.floor() as usize).min(n_in - 2);
    (i0, s - i0 as f64)
}

fn with_extent(vol: &Vol, axis: usize, n: usize) -> Vol {
    let mut v = *vol;
    match axis {
        0 => v.nx = n,
        1 => v.ny = n,
        _ => v.nz = n,
    }
    v
}

/// Linear resample of every channel along one axis.
fn resample_axis(src: &[f64], channels: usize, vol: &Vol, axis: usize, n_out: usize) -> (Vec<f64>, Vol) {
    let out_vol = with_extent(vol, axis, n_out);
    let n_in = vol.extent(axis);
    let (m_in, m_out) = (vol.len(), out_vol.len());
    let mut out = vec![0.0; channels * m_out];
    let s_in = vol.stride(axis);
    let s_out = out_vol.stride(axis);
    let taps: Vec<(usize, f64)> = (0..n_out).map(|i| source_pos(i, n_in, n_out)).collect();
    for c in 0..channels {
        let src_c = &src[c * m_in..(c + 1) * m_in];
        let out_c = &mut out[c * m_out..(c + 1) * m_out];
        for q in out_vol.iter_coords() {
            let mut base = q;
            base[axis] = 0;
            let b_in = vol.index(base[0], base[1], base[2]);
            let (i0, f) = taps[q[axis]];
            let a = src_c[b_in + i0 * s_in];
            let b = src_c[b_in + (i0 + 1) * s_in];
            out_c[out_vol.index(base[0], base[1], base[2]) + q[axis] * s_out] = a + f * (b - a);
        }
    }
    (out, out_vol)
}

/// Transpose of [`resample_axis`].
fn resample_axis_adjoint(
    grad_out: &[f64],
    channels: usize,
    vol_in: &Vol,
    axis: usize,
    n_out: usize,
) -> Vec<f64> {
    let out_vol = with_extent(vol_in, axis, n_out);
    let n_in = vol_in.extent(axis);
    let (m_in, m_out) = (vol_in.len(), out_vol.len());
    let mut g = vec![0.0; channels * m_in];
    let s_in = vol_in.stride(axis);
    let taps: Vec<(usize, f64)> = (0..n_out).map(|i| source_pos(i, n_in, n_out)).collect();
    for c in 0..channels {
        let go = &grad_out[c * m_out..(c + 1) * m_out];
        let gi = &mut g[c * m_in..(c + 1) * m_in];
        for (j, q) in out_vol.iter_coords().enumerate() {
            let mut base = q;
            base[axis] = 0;
            let b_in = vol_in.index(base[0], base[1], base[2]);
            let (i0, f) = taps[q[axis]];
            gi[b_in + i0 * s_in] += (1.0 - f) * go[j];
            gi[b_in + (i0 + 1) * s_in] += f * go[j];
        }
    }
    g
}

/// Separable align-corners resize of planar `channels`-channel data.
pub fn resize(src: &[f64], channels: usize, from: &Vol, to: &Vol) -> Vec<f64> {
    let mut data = src.to_vec();
    let mut vol = *from;
    for axis in 0..from.ndim {
        let n_out = to.extent(axis);
        if n_out != vol.extent(axis) {
            let (d, v) = resample_axis(&data, channels, &vol, axis, n_out);
            data = d;
            vol = v;
        }
    }
    data
}

/// Transpose of [`resize`]: maps an output gradient back onto the input grid.
pub fn resize_adjoint(grad_out: &[f64], channels: usize, from: &Vol, to: &Vol) -> Vec<f64> {
    // forward visits axes 0..ndim; the adjoint runs them in reverse
    let mut vols = vec![*from];
    for axis in 0..from.ndim {
        let last = *vols.last().unwrap();
        vols.push(with_extent(&last, axis, to.extent(axis)));
    }
    let mut g = grad_out.to_vec();
    for axis in (0..from.ndim).rev() {
        let vin = vols[axis];
        let n_out = vols[axis + 1].extent(axis);
        if n_out != vin.extent(axis) {
            g = resample_axis_adjoint(&g, channels, &vin, axis, n_out);
        }
    }
    g
}
