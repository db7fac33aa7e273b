//! Adam with polynomial learning-rate decay over registration pairs.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{Field, ScalarField};
use crate::net::{self, ModelConfig, ModelParams, ParamVars, RegistrationResult};
use crate::objectives::{deep_supervised_loss, LabelMap, LabelPair, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Amortized,
    Instance,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amortized" => Ok(TrainMode::Amortized),
            "instance" => Ok(TrainMode::Instance),
            _ => Err(Error::Config(format!("unknown train mode '{s}' (amortized|instance)"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Amortized => "amortized",
            TrainMode::Instance => "instance",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_power: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay_power: 0.9,
            max_steps: 1000,
            seed: 0,
            mode: TrainMode::Amortized,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("train.lr0 must be > 0, got {}", self.lr0)));
        }
        if !self.decay_power.is_finite() {
            return Err(Error::Config("train.decay_power must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("adam eps must be > 0 and clip norm >= 0".into()));
        }
        Ok(())
    }
}

/// `lr0 * (1 - step / max_steps)^decay_power`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> Result<f64> {
    if step >= config.max_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside 0..{}",
            config.max_steps
        )));
    }
    let frac = 1.0 - step as f64 / config.max_steps as f64;
    Ok(config.lr0 * frac.powf(config.decay_power))
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(tensors: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the step
/// before anything is modified.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape(format!("adam: tensor {i} length mismatch")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: state.t as usize,
                reason: format!("non-finite gradient in tensor {i}"),
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One moving/fixed pair with optional label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub moving: ScalarField,
    pub fixed: ScalarField,
    pub labels: Option<(LabelMap, LabelMap)>,
}

impl TrainingPair {
    pub fn new(moving: ScalarField, fixed: ScalarField) -> Self {
        Self {
            moving,
            fixed,
            labels: None,
        }
    }

    pub fn with_labels(mut self, moving: LabelMap, fixed: LabelMap) -> Self {
        self.labels = Some((moving, fixed));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pairs: Vec<TrainingPair>,
}

impl TrainingSet {
    pub fn new(pairs: Vec<TrainingPair>) -> Result<Self> {
        if let Some(first) = pairs.first() {
            let g = first.fixed.grid();
            for (i, p) in pairs.iter().enumerate() {
                for (what, other) in [("moving", p.moving.grid()), ("fixed", p.fixed.grid())] {
                    if !other.same_shape(g) || other.spacing() != g.spacing() {
                        return Err(Error::Shape(format!("pair {i}: {what} grid differs from pair 0")));
                    }
                }
                if let Some((lm, lf)) = &p.labels {
                    if !lm.grid().same_shape(g) || !lf.grid().same_shape(g) {
                        return Err(Error::Shape(format!("pair {i}: label grid differs")));
                    }
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Level-weighted similarity sum.
    pub similarity: f64,
    /// Level-weighted regularizer sum, before multiplying by lambda.
    pub smoothness: f64,
    pub dice: Option<f64>,
}

pub fn write_history_csv<W: Write>(history: &[LossRecord], mut out: W) -> Result<()> {
    writeln!(out, "step,lr,total,similarity,smoothness,dice")?;
    for r in history {
        let dice = r.dice.map(|d| format!("{d:e}")).unwrap_or_default();
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{}",
            r.step, r.lr, r.total, r.similarity, r.smoothness, dice
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
}

/// Loss, gradients and breakdown for one pair at the current parameters.
pub fn loss_and_gradients(
    params: &ModelParams,
    pair: &TrainingPair,
    loss: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>, LossRecord)> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, true);
    let m = tape.constant(Tensor::from_field(&pair.moving));
    let f = tape.constant(Tensor::from_field(&pair.fixed));
    let reg = net::register_tape(&mut tape, &vars, params.config(), m, f)?;
    let labels = pair.labels.as_ref().map(|(lm, lf)| LabelPair { moving: lm, fixed: lf });
    let terms = deep_supervised_loss(&mut tape, &reg.phis, &reg.residuals, &pair.moving, &pair.fixed, labels, loss)?;
    let total = tape.value(terms.total).item();
    let record = LossRecord {
        step: 0,
        lr: 0.0,
        total,
        similarity: terms.weighted_similarity(),
        smoothness: terms.weighted_smoothness(),
        dice: terms.dice,
    };
    if !total.is_finite() {
        return Ok((total, Vec::new(), record));
    }
    let grads = tape.backward(terms.total)?;
    Ok((total, vars.gradients(&grads, params), record))
}

fn check_compatible(model: &ModelConfig, loss: &LossConfig, train: &TrainConfig) -> Result<()> {
    model.validate()?;
    loss.validate()?;
    train.validate()?;
    if loss.levels != model.levels {
        return Err(Error::Config(format!(
            "loss.levels = {} but model.levels = {}",
            loss.levels, model.levels
        )));
    }
    Ok(())
}

/// Continues training `params`, calling `observe` after every step.
pub fn train_from(
    mut params: ModelParams,
    dataset: &TrainingSet,
    loss: &LossConfig,
    config: &TrainConfig,
    mut observe: impl FnMut(&LossRecord, &ModelParams),
) -> Result<TrainOutcome> {
    check_compatible(params.config(), loss, config)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    params.config().check_dims(dataset.pairs()[0].fixed.grid().dims())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::new(params.tensors());
    let mut history = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let pair = &dataset.pairs()[order.pop().expect("refilled above")];
        let lr = lr_schedule(step, config)?;
        let (total, mut grads, mut record) = loss_and_gradients(&params, pair, loss)?;
        if !total.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {total}"),
            });
        }
        clip_global_norm(&mut grads, config.clip_norm);
        adam_step(params.tensors_mut(), &grads, &mut state, lr, config).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step, reason },
            other => other,
        })?;
        record.step = step;
        record.lr = lr;
        observe(&record, &params);
        history.push(record);
    }
    Ok(TrainOutcome { params, history })
}

/// Trains freshly initialized parameters (seeded by `config.seed`).
pub fn train(dataset: &TrainingSet, model: &ModelConfig, loss: &LossConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let params = ModelParams::init(model, config.seed)?;
    train_from(params, dataset, loss, config, |_, _| {})
}

#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub result: RegistrationResult,
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
}

/// Trains on a single pair, then registers it with the trained parameters.
/// `steps = 0` returns the untrained (identity) registration.
pub fn instance_optimize_pair(
    pair: &TrainingPair,
    model: &ModelConfig,
    loss: &LossConfig,
    config: &TrainConfig,
    steps: usize,
) -> Result<InstanceOutcome> {
    let params = ModelParams::init(model, config.seed)?;
    let (params, history) = if steps == 0 {
        (params, Vec::new())
    } else {
        let cfg = TrainConfig {
            max_steps: steps,
            mode: TrainMode::Instance,
            ..config.clone()
        };
        let set = TrainingSet::new(vec![pair.clone()])?;
        let out = train_from(params, &set, loss, &cfg, |_, _| {})?;
        (out.params, out.history)
    };
    let result = net::register(&pair.moving, &pair.fixed, &params)?;
    Ok(InstanceOutcome { result, params, history })
}

pub fn instance_optimize(
    moving: &ScalarField,
    fixed: &ScalarField,
    model: &ModelConfig,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<RegistrationResult> {
    let pair = TrainingPair::new(moving.clone(), fixed.clone());
    Ok(instance_optimize_pair(&pair, model, loss, config, config.max_steps)?.result)
}
