//! Training hyper-parameters and the `key = value` config format.

use std::fmt;
use std::str::FromStr;

use crate::decoder::{Formulation, Variant, MAX_ITERATIONS};
use crate::error::{Error, Result};
use crate::scorer::{Activation, DropoutConfig, ModelDims};

/// Scale that maps the full-size iteration schedule to the desk preset
/// (75000 iterations becomes 500).
pub const DESK_SCALE: f64 = 1.0 / 150.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DevMetric {
    Uas,
    Las,
}

impl FromStr for DevMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uas" => Ok(DevMetric::Uas),
            "las" => Ok(DevMetric::Las),
            other => Err(Error::Invalid(format!("unknown dev metric {:?}", other))),
        }
    }
}

impl fmt::Display for DevMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DevMetric::Uas => "uas",
            DevMetric::Las => "las",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimsPreset {
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub decay_rate: f64,
    pub decay_step: usize,
    pub amsgrad_after: usize,
    pub max_iterations: usize,
    pub batch_tokens: usize,
    pub early_stop: usize,
    pub max_train_len: usize,
    pub eval_every: usize,
    pub dev_metric: DevMetric,
    pub seed: u64,
    pub dims: DimsPreset,
    pub activation: Activation,
    pub dropout: DropoutConfig,
    /// Enforce a single root child when decoding dev sentences.
    pub single_root: bool,
}

pub fn default_lambda(formulation: Formulation) -> f64 {
    match formulation {
        Formulation::Local => 0.40,
        Formulation::Single => 0.07,
    }
}

impl TrainConfig {
    /// Full-size schedule, dimensions and dropout.
    pub fn full(variant: Variant) -> Self {
        TrainConfig {
            variant,
            lambda: default_lambda(variant.formulation()),
            iterations: variant.default_iterations(),
            learning_rate: 0.01,
            adam_beta1: 0.0,
            adam_beta2: 0.95,
            adam_eps: 1e-12,
            decay_rate: 0.85,
            decay_step: 500,
            amsgrad_after: 5000,
            max_iterations: 75_000,
            batch_tokens: 6000,
            early_stop: 10_000,
            max_train_len: 90,
            eval_every: 100,
            dev_metric: DevMetric::Las,
            seed: 1,
            dims: DimsPreset::Full,
            activation: Activation::Tanh,
            dropout: DropoutConfig::standard(),
            single_root: true,
        }
    }

    /// Small dimensions, no dropout, schedule scaled by [`DESK_SCALE`] and
    /// dev checks every 25 batches.
    pub fn desk(variant: Variant) -> Self {
        TrainConfig {
            dims: DimsPreset::Desk,
            dropout: DropoutConfig::off(),
            eval_every: 25,
            ..Self::full(variant).scaled(DESK_SCALE)
        }
    }

    /// Multiplies every iteration-count knob of the schedule by `factor`,
    /// keeping their ratios. Counts never drop below one.
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |x: usize| ((x as f64 * factor).round() as usize).max(1);
        self.max_iterations = s(self.max_iterations);
        self.early_stop = s(self.early_stop);
        self.amsgrad_after = s(self.amsgrad_after);
        self.decay_step = s(self.decay_step);
        self
    }

    pub fn formulation(&self) -> Formulation {
        self.variant.formulation()
    }

    pub fn model_dims(&self) -> ModelDims {
        match self.dims {
            DimsPreset::Desk => ModelDims::desk(self.formulation()),
            DimsPreset::Full => ModelDims::full(self.formulation()),
        }
    }

    /// Switches the variant; lambda and T follow the new variant's defaults.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.lambda = default_lambda(variant.formulation());
        self.iterations = variant.default_iterations();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{} must lie in [0, 1], got {}", name, x)))
            }
        };
        unit("lambda", self.lambda)?;
        unit("adam_beta1", self.adam_beta1)?;
        unit("decay_rate", self.decay_rate)?;
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Invalid("adam_beta2 must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Invalid("adam_eps must be positive".into()));
        }
        if self.iterations > MAX_ITERATIONS {
            return Err(Error::Invalid(format!("iterations must be at most {}", MAX_ITERATIONS)));
        }
        for (name, x) in [
            ("decay_step", self.decay_step),
            ("batch_tokens", self.batch_tokens),
            ("eval_every", self.eval_every),
            ("max_train_len", self.max_train_len),
        ] {
            if x == 0 {
                return Err(Error::Invalid(format!("{} must be at least 1", name)));
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// ignored; a `variant` line resets lambda and T to that variant's
    /// defaults, so it must precede explicit overrides.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, found {:?}", raw),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Invalid(format!("bad value {:?} for {}", value, key)))
        }
        match key {
            "variant" => *self = self.clone().with_variant(value.parse()?),
            "lambda" => self.lambda = num(key, value)?,
            "iterations" | "T" => self.iterations = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "decay_rate" => self.decay_rate = num(key, value)?,
            "decay_step" => self.decay_step = num(key, value)?,
            "amsgrad_after" => self.amsgrad_after = num(key, value)?,
            "max_iterations" => self.max_iterations = num(key, value)?,
            "batch_tokens" => self.batch_tokens = num(key, value)?,
            "early_stop" => self.early_stop = num(key, value)?,
            "max_train_len" => self.max_train_len = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "dev_metric" => self.dev_metric = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "dims" => {
                self.dims = match value {
                    "desk" => DimsPreset::Desk,
                    "full" => DimsPreset::Full,
                    _ => return Err(Error::Invalid(format!("dims must be desk or full, got {:?}", value))),
                }
            }
            "activation" => {
                self.activation = match value {
                    "tanh" => Activation::Tanh,
                    "identity" => Activation::Identity,
                    _ => return Err(Error::Invalid(format!("unknown activation {:?}", value))),
                }
            }
            "dropout" => {
                self.dropout = match value {
                    "off" => DropoutConfig::off(),
                    "standard" | "on" => DropoutConfig::standard(),
                    _ => return Err(Error::Invalid(format!("dropout must be off or on, got {:?}", value))),
                }
            }
            "single_root" => {
                self.single_root = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(Error::Invalid(format!("single_root must be on or off, got {:?}", value))),
                }
            }
            _ => return Err(Error::Invalid(format!("unknown key {:?}", key))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::full(Variant::Local2O);
        assert_eq!(c.lambda, 0.40);
        assert_eq!(c.iterations, 3);
        assert_eq!(TrainConfig::full(Variant::Single1O).lambda, 0.07);
        assert_eq!(TrainConfig::full(Variant::Single1O).iterations, 0);
        c.validate().unwrap();
    }

    #[test]
    fn desk_schedule() {
        let c = TrainConfig::desk(Variant::Local2O);
        assert_eq!(c.max_iterations, 500);
        assert_eq!(c.early_stop, 67);
        assert_eq!(c.amsgrad_after, 33);
        assert_eq!(c.decay_step, 3);
        let half = TrainConfig::full(Variant::Local2O).scaled(0.5);
        assert_eq!(half.max_iterations, 37_500);
        assert_eq!(half.decay_step, 250);
    }

    #[test]
    fn parses_text() {
        let mut c = TrainConfig::desk(Variant::Local2O);
        c.apply_text("# comment\nvariant = single1o\nlambda = 0.5 # inline\n\ndev_metric = uas\n")
            .unwrap();
        assert_eq!(c.variant, Variant::Single1O);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.dev_metric, DevMetric::Uas);
        assert!(c.apply_text("lambda 0.3").is_err());
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("lambda = x").is_err());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::desk(Variant::Local2O);
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(Variant::Local2O);
        c.decay_step = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(Variant::Local2O);
        c.iterations = 11;
        assert!(c.validate().is_err());
    }
}
