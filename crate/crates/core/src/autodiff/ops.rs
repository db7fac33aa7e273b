use super::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

struct Linear2 {
    ca: f64,
    cb: f64,
}

impl Backward for Linear2 {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let scaled = |c: f64, need: bool| need.then(|| g.iter().map(|x| c * x).collect());
        vec![scaled(self.ca, needs[0]), scaled(self.cb, needs[1])]
    }
}

struct Scale(f64);

impl Backward for Scale {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|x| self.0 * x).collect())]
    }
}

struct Mul;

impl Backward for Mul {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
        ]
    }
}

struct Relu;

impl Backward for Relu {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
        )]
    }
}

struct Concat {
    sizes: Vec<usize>,
}

impl Backward for Concat {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut offset = 0;
        self.sizes
            .iter()
            .zip(needs)
            .map(|(&n, &need)| {
                let part = need.then(|| g[offset..offset + n].to_vec());
                offset += n;
                part
            })
            .collect()
    }
}

struct Sum {
    scale: f64,
}

impl Backward for Sum {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; inputs[0].len()])]
    }
}

impl Tape {
    fn linear2(&mut self, a: Var, b: Var, ca: f64, cb: f64, what: &str) -> Result<Var> {
        same_shape(self, a, b, what)?;
        let (xa, xb) = (self.value(a), self.value(b));
        let data = xa
            .data()
            .iter()
            .zip(xb.data())
            .map(|(x, y)| ca * x + cb * y)
            .collect();
        let out = Tensor::new(xa.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[a, b], Box::new(Linear2 { ca, cb })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear2(a, b, 1.0, 1.0, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear2(a, b, 1.0, -1.0, "sub")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (xa, xb) = (self.value(a), self.value(b));
        let data = xa.data().iter().zip(xb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(xa.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[a, b], Box::new(Mul)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| s * v).collect(),
        };
        self.push_op(out, &[a], Box::new(Scale(s)))
    }

    /// `H2 [fm, ff] = [fm + ff, fm - ff]`.
    pub fn hadamard_pair(&mut self, fm: Var, ff: Var) -> Result<(Var, Var)> {
        let sum = self.linear2(fm, ff, 1.0, 1.0, "hadamard_pair")?;
        let diff = self.linear2(fm, ff, 1.0, -1.0, "hadamard_pair")?;
        Ok((sum, diff))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push_op(out, &[a], Box::new(Relu))
    }

    /// Stacks tensors along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of nothing".into()));
        };
        let tail = self.value(first).shape()[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat: trailing shape {:?} vs {:?}",
                    &t.shape()[1..],
                    tail
                )));
            }
            channels += t.shape()[0];
            sizes.push(t.len());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![channels];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, parts, Box::new(Concat { sizes })))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), &[a], Box::new(Sum { scale: 1.0 }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len() as f64;
        let s = x.data().iter().sum::<f64>() / n;
        self.push_op(Tensor::scalar(s), &[a], Box::new(Sum { scale: 1.0 / n }))
    }

    /// `sum_i w_i * x_i` over scalar (or equally shaped) terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, w0)) = terms.first() else {
            return Err(Error::Shape("weighted_sum of nothing".into()));
        };
        let mut acc = self.scale(first, w0);
        for &(v, w) in &terms[1..] {
            acc = self.linear2(acc, v, 1.0, w, "weighted_sum")?;
        }
        Ok(acc)
    }
}
