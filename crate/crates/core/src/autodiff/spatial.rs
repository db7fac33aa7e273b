use super::{Backward, Tape, Tensor, Var};
use crate::deform::warp_data;
use crate::error::{Error, Result};
use crate::grid::interp::{self, Stencil};
use crate::grid::Vol;

struct Warp;

impl Backward for Warp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (field, disp) = (inputs[0], inputs[1]);
        let vol = field.vol().expect("validated in forward");
        let (c, n, d) = (field.channels(), vol.len(), vol.ndim);
        let (fd, ud) = (field.data(), disp.data());
        let mut gf = needs[0].then(|| vec![0.0; fd.len()]);
        let mut gu = needs[1].then(|| vec![0.0; ud.len()]);
        for (i, p) in vol.iter_coords().enumerate() {
            let mut q = [0.0; 3];
            for a in 0..d {
                q[a] = p[a] as f64 + ud[a * n + i];
            }
            let st = Stencil::new(&vol, q);
            for ch in 0..c {
                let go = g[ch * n + i];
                if go == 0.0 {
                    continue;
                }
                if let Some(gf) = gf.as_mut() {
                    let dst = &mut gf[ch * n..(ch + 1) * n];
                    for k in 0..st.n {
                        dst[st.idx[k]] += st.w[k] * go;
                    }
                }
                if let Some(gu) = gu.as_mut() {
                    let src = &fd[ch * n..(ch + 1) * n];
                    for a in 0..d {
                        gu[a * n + i] += go * st.apply_d(src, a);
                    }
                }
            }
        }
        vec![gf, gu]
    }
}

struct Resize {
    from: Vol,
    to: Vol,
}

impl Backward for Resize {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = inputs[0].channels();
        vec![Some(interp::resize_adjoint(g, c, &self.from, &self.to))]
    }
}

impl Tape {
    /// Backward warp `out(p) = field(p + u(p))`, differentiable in both the
    /// sampled values and the displacement.
    pub fn warp(&mut self, field: Var, displacement: Var) -> Result<Var> {
        let (f, u) = (self.value(field), self.value(displacement));
        let vol = f.vol()?;
        let uvol = u.vol()?;
        if vol != uvol || u.channels() != vol.ndim {
            return Err(Error::Shape(format!(
                "warp of {:?} by displacement {:?}",
                f.shape(),
                u.shape()
            )));
        }
        let out = warp_data(f.data(), f.channels(), &vol, u.data());
        let out = Tensor::new(f.shape().to_vec(), out)?;
        Ok(self.push_op(out, &[field, displacement], Box::new(Warp)))
    }

    /// Align-corners resize by 0.5 or 2.0 along every spatial axis.
    pub fn resize(&mut self, input: Var, factor: f64) -> Result<Var> {
        if factor != 0.5 && factor != 2.0 {
            return Err(Error::InvalidArgument(format!(
                "resize factor must be 0.5 or 2.0, got {factor}"
            )));
        }
        let x = self.value(input);
        let from = x.vol()?;
        let dims: Vec<usize> = from
            .dims()
            .iter()
            .map(|&d| (d as f64 * factor).round() as usize)
            .collect();
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::TooSmall(format!(
                "resizing {:?} by {factor}",
                from.dims()
            )));
        }
        let to = Vol::from_dims(&dims);
        let out = interp::resize(x.data(), x.channels(), &from, &to);
        let out = Tensor::new(Tensor::field_shape(x.channels(), &to), out)?;
        Ok(self.push_op(out, &[input], Box::new(Resize { from, to })))
    }

    /// `compose(a, b)` on displacement tensors: `u_b + u_a(p + u_b)`.
    pub fn compose(&mut self, outer: Var, inner: Var) -> Result<Var> {
        let sampled = self.warp(outer, inner)?;
        self.add(inner, sampled)
    }

    /// Scaling-and-squaring of a stationary velocity tensor.
    pub fn exp_svf(&mut self, velocity: Var, squaring_steps: usize) -> Result<Var> {
        if squaring_steps < 1 {
            return Err(Error::InvalidArgument("squaring_steps must be >= 1".into()));
        }
        let mut u = self.scale(velocity, 1.0 / (1u64 << squaring_steps) as f64);
        for _ in 0..squaring_steps {
            u = self.compose(u, u)?;
        }
        Ok(u)
    }

    /// 2x upsampling of a displacement tensor with values doubled.
    pub fn upsample_displacement(&mut self, displacement: Var) -> Result<Var> {
        let up = self.resize(displacement, 2.0)?;
        Ok(self.scale(up, 2.0))
    }
}
