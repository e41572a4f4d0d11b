//! Adam with bias correction and the tri-stage learning-rate schedule
//! (10% warmup, 40% hold, linear decay for the rest).
//!
//! Moments are kept per parameter name together with a per-parameter step
//! counter, so parameters that sit frozen for a while resume with unbiased
//! corrections instead of stale ones.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_hold_frac")]
    pub hold_frac: f64,
}

fn default_peak_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.98
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_warmup_frac() -> f64 {
    0.1
}

fn default_hold_frac() -> f64 {
    0.4
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: default_peak_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            warmup_frac: default_warmup_frac(),
            hold_frac: default_hold_frac(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "peak learning rate {} must be positive",
                self.peak_lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.warmup_frac < 0.0
            || self.hold_frac < 0.0
            || self.warmup_frac + self.hold_frac > 1.0
        {
            return Err(Error::InvalidArgument(format!(
                "schedule fractions warmup={} hold={} must be non-negative and sum to at most 1",
                self.warmup_frac, self.hold_frac
            )));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of a `total`-step run.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.peak_lr;
        }
        let warm = ((self.warmup_frac * total as f64).ceil() as u64).max(1);
        let hold = (self.hold_frac * total as f64).floor() as u64;
        if step < warm {
            return self.peak_lr * (step + 1) as f64 / warm as f64;
        }
        if step < warm + hold || warm + hold >= total {
            return self.peak_lr;
        }
        let decay_len = (total - warm - hold) as f64;
        self.peak_lr * (total - step) as f64 / decay_len
    }
}

struct Slot<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
    t: u64,
}

/// Adam moment store, keyed by parameter name.
pub struct AdamState<T: Scalar> {
    cfg: OptimizerConfig,
    slots: IndexMap<String, Slot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamState { cfg, slots: IndexMap::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// First moment of a parameter, if it has ever been updated.
    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.m)
    }

    /// One Adam update on a single named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: Tensor::zeros(param.shape().to_vec()),
            v: Tensor::zeros(param.shape().to_vec()),
            t: 0,
        });
        slot.t += 1;
        let b1 = T::from_f64c(self.cfg.beta1);
        let b2 = T::from_f64c(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64c(self.cfg.epsilon);
        let bc1 = one - T::from_f64c(self.cfg.beta1.powi(slot.t as i32));
        let bc2 = one - T::from_f64c(self.cfg.beta2.powi(slot.t as i32));
        let step = T::from_f64c(lr);
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(slot.m.data_mut().iter_mut().zip(slot.v.data_mut().iter_mut()))
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - step * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_hold_decay_shape() {
        let cfg = OptimizerConfig { peak_lr: 1.0, ..Default::default() };
        let total = 100;
        let warm = 10;
        assert!((cfg.lr_at(0, total) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(warm - 1, total) - 1.0).abs() < 1e-12);
        for s in warm..warm + 40 {
            assert_eq!(cfg.lr_at(s, total), 1.0);
        }
        assert!(cfg.lr_at(60, total) < 1.0);
        assert!((cfg.lr_at(99, total) - 0.02).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 50..100 {
            let lr = cfg.lr_at(s, total);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    #[test]
    fn warmup_rounds_up_and_never_exceeds_peak() {
        let cfg = OptimizerConfig { peak_lr: 0.5, ..Default::default() };
        for total in [1u64, 3, 7, 23] {
            for s in 0..total {
                let lr = cfg.lr_at(s, total);
                assert!(lr > 0.0 && lr <= 0.5 + 1e-15, "total {total} step {s} lr {lr}");
            }
        }
    }

    #[test]
    fn matches_textbook_recurrence_on_quadratic() {
        // f(w) = w^2 from w = 1 at a fixed lr; reference recurrence computed
        // by hand alongside the implementation
        let cfg = OptimizerConfig::default();
        let mut state: AdamState<f64> = AdamState::new(cfg).unwrap();
        let mut w = Tensor::scalar(1.0f64);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut wr = 1.0f64;
        let lr = 0.1;
        let mut abs_path = Vec::new();
        for t in 1..=40 {
            let g = 2.0 * w.data()[0];
            state.update("w", &mut w, &Tensor::scalar(g), lr);
            let gr = 2.0 * wr;
            m = 0.9 * m + 0.1 * gr;
            v = 0.98 * v + 0.02 * gr * gr;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.98f64.powi(t));
            wr -= lr * mhat / (vhat.sqrt() + 1e-8);
            assert!(
                (w.data()[0] - wr).abs() < 1e-7,
                "step {t}: {} vs {wr}",
                w.data()[0]
            );
            abs_path.push(w.data()[0].abs());
        }
        // |w| shrinks monotonically until the iterate first crosses zero
        for pair in abs_path[..11].windows(2) {
            assert!(pair[1] < pair[0], "expected decrease: {pair:?}");
        }
        assert!(abs_path.last().unwrap() < &0.5);
    }

    #[test]
    fn untouched_names_have_no_moments() {
        let mut state: AdamState<f32> = AdamState::new(OptimizerConfig::default()).unwrap();
        let mut w = Tensor::scalar(1.0f32);
        state.update("a", &mut w, &Tensor::scalar(0.5), 1e-3);
        assert!(state.first_moment("a").is_some());
        assert!(state.first_moment("b").is_none());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = OptimizerConfig::default();
        cfg.peak_lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = OptimizerConfig::default();
        cfg.warmup_frac = 0.8;
        cfg.hold_frac = 0.3;
        assert!(cfg.validate().is_err());
        let mut cfg = OptimizerConfig::default();
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
    }
}
