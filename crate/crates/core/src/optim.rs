//! Lion optimizer and token-keyed learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::is_no_decay;
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LionConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, weight_decay: 1e-4 }
    }
}

impl LionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} ({b}) must lie in [0, 1)"));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            errs.push(format!("optim.weight_decay ({}) must be non-negative", self.weight_decay));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn shape_err(detail: String) -> Error {
    TensorError::Dimension { op: "lion_step", detail }.into()
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Lion with decoupled weight decay. Momentum is keyed by parameter name and
/// created lazily at zero on a parameter's first update.
#[derive(Clone, Debug, Default)]
pub struct Lion<T: Real = f32> {
    pub config: LionConfig,
    momentum: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Lion<T> {
    pub fn new(config: LionConfig) -> Self {
        Self { config, momentum: BTreeMap::new() }
    }

    /// `c = β1·m + (1-β1)·g`, `p -= lr·(sign(c) + λ·p)`, `m = β2·m + (1-β2)·g`.
    ///
    /// Decay is skipped for biases and norm gains.
    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(shape_err(format!("param {:?} vs grad {:?}", param.shape(), grad.shape())));
        }
        let m = self.momentum.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape()));
        if m.shape() != param.shape() {
            return Err(shape_err(format!("momentum {:?} vs param {:?}", m.shape(), param.shape())));
        }
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let lr = T::from_f64(lr);
        let wd = if is_no_decay(name) { T::zero() } else { T::from_f64(self.config.weight_decay) };
        let one = T::one();
        for ((p, &g), m) in param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()) {
            let c = b1 * *m + (one - b1) * g;
            *p = *p - lr * (sign(c) + wd * *p);
            *m = b2 * *m + (one - b2) * g;
        }
        Ok(())
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor<T>> {
        self.momentum.get(name)
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.momentum
    }

    pub fn from_state(config: LionConfig, momentum: BTreeMap<String, Tensor<T>>) -> Self {
        Self { config, momentum }
    }

    /// Renames `layers.<i>.*` entries after layers are removed. `map` returns
    /// the new position of old position `i`, or `None` to drop its state.
    pub fn remap_layers(&mut self, map: impl Fn(usize) -> Option<usize>) {
        let old = std::mem::take(&mut self.momentum);
        for (name, t) in old {
            match crate::model::layer_of(&name) {
                Some(i) => {
                    if let Some(j) = map(i) {
                        let rest = &name[format!("layers.{i}.").len()..];
                        self.momentum.insert(format!("layers.{j}.{rest}"), t);
                    }
                }
                None => {
                    self.momentum.insert(name, t);
                }
            }
        }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `final_ratio · peak_lr`
/// at `total_tokens`; flat afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
    pub final_ratio: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_tokens: u64, total_tokens: u64) -> Self {
        Self { peak_lr, warmup_tokens, total_tokens, final_ratio: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            errs.push(format!("train.peak_lr ({}) must be positive", self.peak_lr));
        }
        if self.warmup_tokens > self.total_tokens {
            errs.push(format!(
                "train.warmup_tokens ({}) exceeds train.total_tokens ({})",
                self.warmup_tokens, self.total_tokens
            ));
        }
        if !(0.0..=1.0).contains(&self.final_ratio) {
            errs.push(format!("final lr ratio ({}) must lie in [0, 1]", self.final_ratio));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn lr_at(&self, tokens: u64) -> f64 {
        let floor = self.final_ratio * self.peak_lr;
        if tokens < self.warmup_tokens {
            return self.peak_lr * tokens as f64 / self.warmup_tokens as f64;
        }
        if tokens >= self.total_tokens {
            return floor;
        }
        let span = (self.total_tokens - self.warmup_tokens) as f64;
        let progress = (tokens - self.warmup_tokens) as f64 / span;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Upper bound on `|dlr/dtoken|`.
    pub fn max_slope(&self) -> f64 {
        let warm = if self.warmup_tokens > 0 { self.peak_lr / self.warmup_tokens as f64 } else { 0.0 };
        let span = self.total_tokens.saturating_sub(self.warmup_tokens);
        let cos = if span > 0 {
            (1.0 - self.final_ratio) * self.peak_lr * std::f64::consts::FRAC_PI_2 / span as f64
        } else {
            0.0
        };
        warm.max(cos)
    }
}
