use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::ModelConfig;
use crate::objectives::LossConfig;
use crate::train::TrainConfig;

/// Everything a training or registration run is parameterized by.
///
/// Text form is one `section.key = value` per line; `#` starts a comment.
/// `loss.levels` always follows `model.levels`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

fn apply_model(model: &mut ModelConfig, key: &str, raw: &str) -> Result<bool> {
    let full = format!("model.{key}");
    match key {
        "start_channels" => model.start_channels = value(&full, raw)?,
        "width_factor" => model.width_factor = value(&full, raw)?,
        "encoder_convs" => model.encoder_convs = value(&full, raw)?,
        "levels" => model.levels = value(&full, raw)?,
        "squaring_steps" => model.squaring_steps = value(&full, raw)?,
        "ndim" => model.ndim = value(&full, raw)?,
        "flow_kernel" => model.flow_kernel = value(&full, raw)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Sets one `section.key`. Unknown keys are errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        let (section, name) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} has no section")))?;
        let known = match section {
            "model" => apply_model(&mut self.model, name, raw)?,
            "loss" => {
                match name {
                    "similarity" => self.loss.similarity = value(key, raw)?,
                    "ncc_window" => self.loss.ncc_window = value(key, raw)?,
                    "lambda" => self.loss.lambda = value(key, raw)?,
                    "dice_weight" => self.loss.dice_weight = value(key, raw)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                true
            }
            "train" => {
                match name {
                    "lr0" => self.train.lr0 = value(key, raw)?,
                    "decay_power" => self.train.decay_power = value(key, raw)?,
                    "max_steps" => self.train.max_steps = value(key, raw)?,
                    "seed" => self.train.seed = value(key, raw)?,
                    "mode" => self.train.mode = value(key, raw)?,
                    "beta1" => self.train.beta1 = value(key, raw)?,
                    "beta2" => self.train.beta2 = value(key, raw)?,
                    "adam_eps" => self.train.adam_eps = value(key, raw)?,
                    "clip_norm" => self.train.clip_norm = value(key, raw)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                true
            }
            _ => false,
        };
        if !known {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.loss.levels = self.model.levels;
        Ok(())
    }

    /// Applies `KEY=VALUE` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every line of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let t = &self.train;
        let mut out = model_config_to_text(&self.model);
        out.push_str(&format!(
            "loss.similarity = {}\nloss.ncc_window = {}\nloss.lambda = {:?}\nloss.dice_weight = {:?}\n",
            l.similarity, l.ncc_window, l.lambda, l.dice_weight
        ));
        out.push_str(&format!(
            "train.lr0 = {:?}\ntrain.decay_power = {:?}\ntrain.max_steps = {}\ntrain.seed = {}\ntrain.mode = {}\n\
             train.beta1 = {:?}\ntrain.beta2 = {:?}\ntrain.adam_eps = {:?}\ntrain.clip_norm = {:?}\n",
            t.lr0, t.decay_power, t.max_steps, t.seed, t.mode, t.beta1, t.beta2, t.adam_eps, t.clip_norm
        ));
        out
    }
}

pub fn model_config_to_text(m: &ModelConfig) -> String {
    format!(
        "model.start_channels = {}\nmodel.width_factor = {}\nmodel.encoder_convs = {}\nmodel.levels = {}\n\
         model.squaring_steps = {}\nmodel.ndim = {}\nmodel.flow_kernel = {}\n",
        m.start_channels, m.width_factor, m.encoder_convs, m.levels, m.squaring_steps, m.ndim, m.flow_kernel
    )
}

/// Parses text holding only `model.*` keys.
pub fn model_config_from_text(text: &str) -> Result<ModelConfig> {
    let mut model = ModelConfig::default();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line.split_once('=').and_then(|(k, v)| {
            let k = k.trim().strip_prefix("model.")?;
            Some((k, v))
        });
        let (k, v) = parsed.ok_or_else(|| Error::Config(format!("line {}: expected model.key = value", no + 1)))?;
        if !apply_model(&mut model, k, v.trim())? {
            return Err(Error::Config(format!("line {}: unknown key model.{k}", no + 1)));
        }
    }
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Similarity;
    use crate::train::TrainMode;

    #[test]
    fn parse_and_override() {
        let text = "# run\nmodel.start_channels = 8\nmodel.levels=3 # coarse\nloss.similarity = mse\ntrain.mode = instance\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.start_channels, 8);
        assert_eq!(cfg.loss.levels, 3);
        assert_eq!(cfg.loss.similarity, Similarity::Mse);
        assert_eq!(cfg.train.mode, TrainMode::Instance);
        cfg.apply_overrides(&["train.lr0=0.5", "loss.lambda = 2"]).unwrap();
        assert_eq!(cfg.train.lr0, 0.5);
        assert_eq!(cfg.loss.lambda, 2.0);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors() {
        for bad in ["model.bogus = 1", "nosection = 1", "model.levels = x", "just words", "loss.levels = 3"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let m = ModelConfig {
            ndim: 2,
            ..ModelConfig::default()
        };
        assert_eq!(model_config_from_text(&model_config_to_text(&m)).unwrap(), m);
        assert!(model_config_from_text("train.lr0 = 1").is_err());
    }
}
