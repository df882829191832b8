use std::ops::Range;

use crate::denoiser::model::ParamLayout;
use crate::error::{bail, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            ema_decay: 0.9999,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "lr must be finite and nonnegative, got {}", self.lr);
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_decay", self.ema_decay),
        ] {
            if !(0.0..1.0).contains(&b) {
                bail!(Config, "{name} must lie in [0, 1), got {b}");
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Config, "eps must be positive and weight_decay nonnegative");
        }
        Ok(())
    }
}

/// Named contiguous parameter ranges; frozen groups are skipped by the update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroups {
    groups: Vec<(String, Range<usize>, bool)>,
}

impl ParamGroups {
    pub fn single(len: usize) -> Self {
        Self {
            groups: vec![("params".to_string(), 0..len, true)],
        }
    }

    /// One group per named view; `trainable` decides which are updated.
    pub fn from_layout(layout: &ParamLayout, trainable: impl Fn(&str) -> bool) -> Self {
        Self {
            groups: layout
                .views()
                .iter()
                .map(|v| (v.name.clone(), v.range(), trainable(&v.name)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.1.end).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Range<usize>, bool)> {
        self.groups
            .iter()
            .map(|(n, r, t)| (n.as_str(), r.clone(), *t))
    }
}

/// Adam moments, EMA weights and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub ema: Vec<T>,
    pub step: u64,
}

/// AdamW with decoupled weight decay and an exponential moving average of
/// the weights.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    /// EMA starts at the current parameters.
    pub fn new(config: OptimizerConfig, params: &[T]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: OptimizerState {
                m: vec![T::zero(); params.len()],
                v: vec![T::zero(); params.len()],
                ema: params.to_vec(),
                step: 0,
            },
        })
    }

    pub fn ema(&self) -> &[T] {
        &self.state.ema
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], groups: &ParamGroups) -> Result<()> {
        let n = params.len();
        if grads.len() != n || self.state.m.len() != n || groups.len() != n {
            bail!(
                Shape,
                "optimizer sizes disagree: params {n}, grads {}, state {}, groups {}",
                grads.len(),
                self.state.m.len(),
                groups.len()
            );
        }
        for (name, r, _) in groups.iter() {
            if let Some(i) = grads[r.clone()].iter().position(|g| !g.is_finite()) {
                bail!(
                    Numeric,
                    "non-finite gradient in parameter group '{name}' (element {i})"
                );
            }
        }
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (ob1, ob2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let (ibc1, ibc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let decay = T::c(1.0 - c.lr * c.weight_decay);
        let lr = T::c(c.lr);
        let eps = T::c(c.eps);
        for (_, r, trainable) in groups.iter() {
            if !trainable {
                continue;
            }
            for i in r {
                let g = grads[i];
                let m = b1 * self.state.m[i] + ob1 * g;
                let v = b2 * self.state.v[i] + ob2 * g * g;
                self.state.m[i] = m;
                self.state.v[i] = v;
                let mhat = m * ibc1;
                let vhat = v * ibc2;
                params[i] = decay * params[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        let d = T::c(c.ema_decay);
        let od = T::c(1.0 - c.ema_decay);
        for (e, &p) in self.state.ema.iter_mut().zip(params.iter()) {
            *e = d * *e + od * p;
        }
        Ok(())
    }
}
