//! Adam with bias correction and an exponential moving average of the weights.

use serde::{Deserialize, Serialize};

use super::model::CascadeModel;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.999,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if self.lr > 0.0 && unit(self.beta1) && unit(self.beta2) && self.eps > 0.0 && unit(self.ema_decay) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments, step counter and EMA shadow weights for one cascade.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: CascadeModel<T>,
    v: CascadeModel<T>,
    pub ema: CascadeModel<T>,
}

impl<T: Real> OptimizerState<T> {
    /// Zero moments; the shadow starts at the current weights.
    pub fn new(model: &CascadeModel<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
            ema: model.clone(),
        })
    }

    /// One Adam update of `model` with gradient `grads`, then the EMA update.
    pub fn step(&mut self, model: &mut CascadeModel<T>, grads: &CascadeModel<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let params = model.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, g)), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let upd = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p[i] = T::from_f64(p[i].as_f64() - upd);
            }
        }
        self.update_ema(model);
    }

    /// `shadow ← d·shadow + (1 − d)·θ`.
    pub fn update_ema(&mut self, model: &CascadeModel<T>) {
        let d = self.config.ema_decay;
        for (s, (_, p)) in self.ema.tensors_mut().into_iter().zip(model.tensors()) {
            for (a, &b) in s.iter_mut().zip(p) {
                *a = T::from_f64(d * a.as_f64() + (1.0 - d) * b.as_f64());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetConfig {
        NetConfig {
            levels: 1,
            base_filters: 1,
            dropout: 0.0,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut model = CascadeModel::<f64>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = model.clone();
        let mut grads = model.zeros_like();
        grads.stages[0].convs[0].weight[0] = 0.37;
        grads.stages[1].convs[0].bias[0] = -2.5;
        let mut opt = OptimizerState::new(&model, AdamConfig::default()).unwrap();
        opt.step(&mut model, &grads);
        let dw = model.stages[0].convs[0].weight[0] - before.stages[0].convs[0].weight[0];
        let db = model.stages[1].convs[0].bias[0] - before.stages[1].convs[0].bias[0];
        assert!((dw + 1e-3).abs() < 1e-9, "{dw}");
        assert!((db - 1e-3).abs() < 1e-9, "{db}");
        // zero gradient leaves a parameter in place
        assert_eq!(model.stages[2].convs[0].weight, before.stages[2].convs[0].weight);
    }

    #[test]
    fn ema_converges_geometrically() {
        let model = CascadeModel::<f64>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut opt = OptimizerState::new(&model.zeros_like(), AdamConfig::default()).unwrap();
        for _ in 0..10 {
            opt.update_ema(&model);
        }
        let gap = 0.999f64.powi(10);
        for ((_, s), (_, p)) in opt.ema.tensors().into_iter().zip(model.tensors()) {
            for (&a, &b) in s.iter().zip(p) {
                assert!((b - a - gap * b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
