use super::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel biased mean and variance over spatial voxels.
pub(crate) fn channel_moments(x: &Tensor) -> Vec<(f64, f64)> {
    let c = x.channels();
    let m = x.len() / c;
    (0..c)
        .map(|ch| {
            let v = &x.data()[ch * m..(ch + 1) * m];
            let mean = v.iter().sum::<f64>() / m as f64;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
            (mean, var)
        })
        .collect()
}

struct InstanceNorm {
    moments: Vec<(f64, f64)>,
    eps: f64,
}

impl Backward for InstanceNorm {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let c = x.channels();
        let m = x.len() / c;
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gg = needs[1].then(|| vec![0.0; c]);
        let mut gs = needs[2].then(|| vec![0.0; c]);
        for ch in 0..c {
            let (mean, var) = self.moments[ch];
            let inv = 1.0 / (var + self.eps).sqrt();
            let xs = &x.data()[ch * m..(ch + 1) * m];
            let go = &g[ch * m..(ch + 1) * m];
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for (&xv, &gv) in xs.iter().zip(go) {
                let xh = (xv - mean) * inv;
                sum_g += gv;
                sum_gx += gv * xh;
            }
            if let Some(gg) = gg.as_mut() {
                gg[ch] = sum_gx;
            }
            if let Some(gs) = gs.as_mut() {
                gs[ch] = sum_g;
            }
            if let Some(gx) = gx.as_mut() {
                let gm = gain.data()[ch];
                let nm = m as f64;
                let dst = &mut gx[ch * m..(ch + 1) * m];
                for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(go) {
                    let xh = (xv - mean) * inv;
                    *d = gm * inv * (gv - sum_g / nm - xh * sum_gx / nm);
                }
            }
        }
        vec![gx, gg, gs]
    }
}

impl Tape {
    /// Per-channel standardization over spatial voxels followed by an affine
    /// `gain` / `shift`.
    pub fn instance_norm(&mut self, input: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("instance norm eps must be > 0, got {eps}")));
        }
        let x = self.value(input);
        let c = x.channels();
        let m = x.len() / c;
        if x.shape().len() < 2 || m < 2 {
            return Err(Error::DegenerateVariance(format!(
                "instance norm over {m} voxel(s) per channel"
            )));
        }
        for (name, v) in [("gain", gain), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "instance norm {name} shape {:?} for {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let moments = channel_moments(x);
        let (gd, sd) = (self.value(gain).data(), self.value(shift).data());
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let (mean, var) = moments[ch];
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &xv) in out[ch * m..(ch + 1) * m]
                .iter_mut()
                .zip(&x.data()[ch * m..(ch + 1) * m])
            {
                *o = gd[ch] * (xv - mean) * inv + sd[ch];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push_op(
            out,
            &[input, gain, shift],
            Box::new(InstanceNorm { moments, eps }),
        ))
    }
}
