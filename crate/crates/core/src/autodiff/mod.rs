//! Define-by-run reverse-mode differentiation over dense planar tensors.
//!
//! A [`Tape`] records each executed op together with its backward rule.
//! Field-like tensors are channels-first with spatial axes in storage order,
//! i.e. shape `[C, ny, nx]` in 2D and `[C, nz, ny, nx]` in 3D.

mod check;
mod conv;
mod norm;
mod ops;
mod spatial;

pub use check::{directional_check, gradient_check, GradCheckReport};
pub(crate) use norm::channel_moments;
pub use norm::DEFAULT_EPS as NORM_EPS;

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, Vol};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Channels-first tensor holding a planar field.
    pub fn from_field<F: Field>(field: &F) -> Self {
        let mut shape = vec![field.channels()];
        shape.extend(field.grid().dims().iter().rev());
        Self {
            shape,
            data: field.data().to_vec(),
        }
    }

    /// Reinterprets the tensor as a field on `grid`.
    pub fn to_field<F: Field>(&self, grid: &GridSpec) -> Result<F> {
        let vol = self.vol()?;
        if vol.dims() != grid.dims() {
            return Err(Error::Shape(format!(
                "tensor spatial dims {:?} vs grid {:?}",
                vol.dims(),
                grid.dims()
            )));
        }
        F::from_parts(grid.clone(), self.shape[0], self.data.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First value; the whole value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extent of a channels-first field tensor.
    pub fn vol(&self) -> Result<Vol> {
        match self.shape.len() {
            3 => Ok(Vol::from_dims(&[self.shape[2], self.shape[1]])),
            4 => Ok(Vol::from_dims(&[self.shape[3], self.shape[2], self.shape[1]])),
            _ => Err(Error::Shape(format!(
                "expected a [C, spatial..] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn field_shape(channels: usize, vol: &Vol) -> Vec<usize> {
        let mut shape = vec![channels];
        shape.extend(vol.dims().iter().rev());
        shape
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
///
/// Returns one gradient per input, `None` where `needs[i]` is false or the
/// input receives no gradient.
pub trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Single-owner record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of a custom op. The rule is dropped when no input
    /// requires a gradient.
    pub fn push_op(&mut self, value: Tensor, inputs: &[Var], rule: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            rule: requires_grad.then_some(rule),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {root_len} values"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let parts = rule.backward(&inputs, &node.value, &g, &needs);
            for (v, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, p) in acc.iter_mut().zip(&part) {
                            *a += p;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar root with respect to recorded values.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        let t = Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        let vol = t.vol().unwrap();
        assert_eq!((vol.nx, vol.ny, vol.nz), (4, 3, 1));
        assert!(Tensor::scalar(1.0).vol().is_err());
    }

    #[test]
    fn field_round_trip() {
        let g = GridSpec::isotropic(&[4, 3, 2]).unwrap();
        let f = crate::grid::VectorField::from_fn(g.clone(), |p| {
            [p[0] as f64, p[1] as f64, p[2] as f64]
        })
        .unwrap();
        let t = Tensor::from_field(&f);
        assert_eq!(t.shape(), &[3, 2, 3, 4]);
        let back: crate::grid::VectorField = t.to_field(&g).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        // z = 2x * x
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);
        assert!(g.get(c).is_none());
    }
}
