//! Encoder, per-level flow estimators and the coarse-to-fine registration
//! pass.

mod forward;

pub use forward::{
    build_feature_pyramid, encode, estimate_flow, register, register_tape, ParamVars,
    RegistrationResult, TapeRegistration,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::deform::DEFAULT_SQUARING_STEPS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `N_s`, channels of the encoder output.
    pub start_channels: usize,
    /// `K_s`, multiplier on estimator hidden width.
    pub width_factor: usize,
    /// `n_c`, number of encoder Conv-Norm-Act blocks.
    pub encoder_convs: usize,
    pub levels: usize,
    pub squaring_steps: usize,
    pub ndim: usize,
    /// Kernel of the final flow convolution, 3 or 1.
    pub flow_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            start_channels: 32,
            width_factor: 1,
            encoder_convs: 3,
            levels: 5,
            squaring_steps: DEFAULT_SQUARING_STEPS,
            ndim: 3,
            flow_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if self.start_channels == 0 {
            return bad("model.start_channels must be >= 1".into());
        }
        if self.width_factor == 0 {
            return bad("model.width_factor must be >= 1".into());
        }
        if self.levels == 0 {
            return bad("model.levels must be >= 1".into());
        }
        if self.squaring_steps == 0 {
            return bad("model.squaring_steps must be >= 1".into());
        }
        if !(2..=3).contains(&self.ndim) {
            return bad(format!("model.ndim must be 2 or 3, got {}", self.ndim));
        }
        if self.flow_kernel != 1 && self.flow_kernel != 3 {
            return bad(format!("model.flow_kernel must be 1 or 3, got {}", self.flow_kernel));
        }
        Ok(())
    }

    /// Rejects grids the pyramid cannot halve `levels - 1` times.
    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        self.validate()?;
        if dims.len() != self.ndim {
            return Err(Error::Config(format!(
                "model is {}D but the image is {}D",
                self.ndim,
                dims.len()
            )));
        }
        let f = 1usize << (self.levels - 1);
        if let Some(d) = dims.iter().find(|&&d| d % f != 0 || d / f < 2) {
            return Err(Error::Config(format!(
                "dimension {d} must be a multiple of 2^(levels-1) = {f} with at least 2 voxels at the coarsest level"
            )));
        }
        Ok(())
    }

    /// Output channels of each encoder block.
    pub fn encoder_plan(&self) -> Vec<usize> {
        let n = self.encoder_convs;
        (0..n)
            .map(|i| {
                if (n - 1 - i).is_multiple_of(2) {
                    self.start_channels
                } else {
                    2 * self.start_channels
                }
            })
            .collect()
    }

    pub fn estimator_width(&self) -> usize {
        2 * self.start_channels * self.width_factor
    }

    /// Names and shapes of all parameter tensors, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let kernel = |k: usize| vec![k; self.ndim];
        let mut out = Vec::new();
        let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, cin: usize, cout: usize| {
            let mut w = vec![cout, cin];
            w.extend(kernel(3));
            out.push((format!("{prefix}.weight"), w));
            out.push((format!("{prefix}.bias"), vec![cout]));
            out.push((format!("{prefix}.gain"), vec![cout]));
            out.push((format!("{prefix}.shift"), vec![cout]));
        };
        let mut cin = 1;
        for (i, cout) in self.encoder_plan().into_iter().enumerate() {
            block(&mut out, format!("encoder.{i}"), cin, cout);
            cin = cout;
        }
        let width = self.estimator_width();
        for l in 1..=self.levels {
            let mut cin = 2 * self.start_channels;
            for j in 0..3 {
                block(&mut out, format!("estimator.{l}.{j}"), cin, width);
                cin = width;
            }
            let mut w = vec![self.ndim, width];
            w.extend(kernel(self.flow_kernel));
            out.push((format!("estimator.{l}.flow.weight"), w));
            out.push((format!("estimator.{l}.flow.bias"), vec![self.ndim]));
        }
        out
    }

    fn estimator_offset(&self, level: usize) -> usize {
        4 * self.encoder_convs + (level - 1) * 14
    }
}

/// All trainable tensors of one model, named and ordered by
/// [`ModelConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Fan-in scaled uniform convolutions, unit gain, zero shift and a zero
    /// final flow convolution at every level.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        let mut fan_in = 1usize;
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data = if name.contains(".flow.") {
                vec![0.0; n]
            } else if name.ends_with(".weight") {
                fan_in = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name.ends_with(".bias") {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout of `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != named.len() {
            return Err(Error::Shape(format!(
                "model needs {} tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((want, shape), (name, t)) in layout.into_iter().zip(named) {
            if want != name || t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "expected tensor {want} {shape:?}, got {name} {:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
