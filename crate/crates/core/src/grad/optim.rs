use serde::{Deserialize, Serialize};

use super::checkpoint::ParamStore;
use crate::error::{Result, SokeError};

/// Cosine learning-rate decay with optional linear warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            min_lr: 0.0,
            warmup_steps: 0,
            total_steps: 1000,
        }
    }
}

impl CosineSchedule {
    /// Learning rate for the zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub schedule: CosineSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: Some(1.0),
            schedule: CosineSchedule::default(),
        }
    }
}

/// First/second moment accumulators for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// Adam with a cosine schedule. A parameter whose gradient is identically
/// zero in a step is left untouched (its moments are not decayed either).
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            state: OptimizerState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr(self.state.step)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(usize, Vec<f64>)]) -> Result<()> {
        let mut scale = 1.0;
        if let Some(clip) = self.config.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(SokeError::Divergence("gradient norm is not finite".into()));
            }
            if norm > clip {
                scale = clip / norm;
            }
        }
        let lr = self.current_lr();
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let p = &mut params.get_mut(*id).data;
            if p.len() != g.len() {
                return Err(SokeError::Shape {
                    op: "adam",
                    detail: format!("param {id} has {} values, gradient {}", p.len(), g.len()),
                });
            }
            let m = &mut self.state.m[*id];
            let v = &mut self.state.v[*id];
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    #[test]
    fn cosine_schedule_shape() {
        let s = CosineSchedule {
            base_lr: 1.0,
            min_lr: 0.1,
            warmup_steps: 0,
            total_steps: 100,
        };
        assert!((s.lr(0) - 1.0).abs() < 1e-12);
        assert!((s.lr(50) - 0.55).abs() < 1e-12);
        assert!((s.lr(100) - 0.1).abs() < 1e-12);
        assert!((s.lr(500) - 0.1).abs() < 1e-12);
        let w = CosineSchedule { warmup_steps: 10, ..s };
        assert!((w.lr(0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[(id, vec![0.5, 0.5, 0.5])]).unwrap();
        let after_first = store.get(id).clone();
        adam.step(&mut store, &[(id, vec![0.0; 3])]).unwrap();
        assert_eq!(store.get(id), &after_first);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::default();
        let id = store.add("x", Tensor::vector(vec![3.0, -4.0]));
        let config = AdamConfig {
            clip_norm: None,
            schedule: CosineSchedule {
                base_lr: 0.1,
                total_steps: 500,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut adam = Adam::new(config, &store);
        for _ in 0..500 {
            let g: Vec<f64> = store.get(id).data.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut store, &[(id, g)]).unwrap();
        }
        assert!(store.get(id).data.iter().all(|x| x.abs() < 1e-2));
    }
}
