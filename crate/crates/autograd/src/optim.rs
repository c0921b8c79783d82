use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to `floor * base` over `total` steps.
    Cosine { total: u64, floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let base = self.config.lr;
        match self.config.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total, floor } => {
                let t = (self.step as f64 / total.max(1) as f64).min(1.0);
                let mult = floor + (1.0 - floor) * 0.5 * (1.0 + (PI * t).cos());
                base * mult
            }
        }
    }

    /// One update of every parameter that has a gradient and is not frozen.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        is_frozen: impl Fn(&str) -> bool,
    ) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .filter(|(n, _)| !is_frozen(n))
                    .flat_map(|(_, g)| g.data().iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            if is_frozen(name) {
                continue;
            }
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
