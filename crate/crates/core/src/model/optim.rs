use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            epochs: 8,
            warmup_ratio: 0.01,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size >= 1
            && (0.0..=1.0).contains(&self.warmup_ratio)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "train config: out-of-range optimizer setting",
            ))
        }
    }

    /// Warmup length for a run of `total_steps` updates (at least one).
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        ((self.warmup_ratio * total_steps as f64).ceil() as usize).max(1)
    }
}

/// Linear warmup to `lr`, then constant: `lr·(s+1)/warmup` for `s < warmup`.
pub fn learning_rate(lr: f64, step: usize, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        lr * (step + 1) as f64 / warmup_steps as f64
    } else {
        lr
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only, not to
/// biases, gains or vectors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: TrainConfig,
    pub warmup_steps: usize,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: TrainConfig, store: &ParamStore, total_steps: usize) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect()
        };
        Self {
            warmup_steps: cfg.warmup_steps(total_steps),
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(self.cfg.lr, self.step, self.warmup_steps)
    }

    /// Applies the gradients held in `store`. Returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore) -> Result<f64> {
        let ids: Vec<_> = store.ids().collect();
        let norm = ids
            .iter()
            .map(|&id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (k, &id) in ids.iter().enumerate() {
            let decay = if store.value(id).shape().len() == 2 {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                let g = grad[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.adam_eps);
                w[i] -= lr * (step + decay * w[i]);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig::default();
        let w = cfg.warmup_steps(1000);
        assert_eq!(w, 10);
        assert_eq!(learning_rate(1.0, 0, w), 0.1);
        assert_eq!(learning_rate(1.0, 4, w), 0.5);
        assert_eq!(learning_rate(1.0, 9, w), 1.0);
        assert_eq!(learning_rate(1.0, 500, w), 1.0);
        assert_eq!(cfg.warmup_steps(3), 1);
    }

    #[test]
    fn adamw_moves_against_the_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let b = store.add("b", Tensor::vector(vec![0.5]));
        let cfg = TrainConfig {
            lr: 0.1,
            warmup_ratio: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store, 10);
        store.grad_mut(a).data_mut().copy_from_slice(&[0.3, -0.2]);
        store.grad_mut(b).data_mut()[0] = 0.01;
        opt.update(&mut store).unwrap();
        // First Adam step has unit magnitude per coordinate; decay only on the matrix.
        let av = store.value(a).data();
        assert!((av[0] - (1.0 - 0.1 * (1.0 + 0.01))).abs() < 1e-6);
        assert!((av[1] - (-1.0 + 0.1 * (1.0 + 0.01))).abs() < 1e-6);
        assert!((store.value(b).data()[0] - 0.4).abs() < 1e-6);
    }
}
