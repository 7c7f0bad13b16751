use std::collections::BTreeMap;

use super::config::OptimizerConfig;
use crate::autograd::Matrix;
use crate::model::ParamStore;

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. Parameters absent from
    /// `grads` still receive weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let (rows, cols) = p.dim();
            if rows > 1 && cols > 1 && c.weight_decay > 0.0 {
                p.mapv_inplace(|w| w * (1.0 - lr * c.weight_decay));
            }
            let Some(g) = grads.get(name) else {
                continue;
            };
            let m = self.first.entry(name.clone()).or_insert_with(|| Matrix::zeros(p.dim()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Matrix::zeros(p.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
    }
}

/// Global L2 norm over every gradient.
pub fn global_norm(grads: &BTreeMap<String, Matrix>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: f64) -> ParamStore {
        ParamStore::from_tensors(BTreeMap::from([
            ("w".to_string(), Matrix::from_elem((2, 2), value)),
            ("b".to_string(), Matrix::from_elem((1, 2), value)),
        ]))
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut p = store(1.0);
        let grads = BTreeMap::from([
            ("w".to_string(), Matrix::from_elem((2, 2), 3.0)),
            ("b".to_string(), Matrix::from_elem((1, 2), -0.5)),
        ]);
        opt.step(&mut p, &grads, 0.1);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!(p.get("w").unwrap().iter().all(|&w| (w - 0.9).abs() < 1e-7));
        assert!(p.get("b").unwrap().iter().all(|&w| (w - 1.1).abs() < 1e-6));
    }

    #[test]
    fn decay_only_touches_matrices() {
        let mut opt = AdamW::new(OptimizerConfig::default());
        let mut p = store(2.0);
        opt.step(&mut p, &BTreeMap::new(), 0.1);
        assert!(p.get("w").unwrap().iter().all(|&w| (w - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15));
        assert!(p.get("b").unwrap().iter().all(|&w| w == 2.0));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Matrix::from_elem((1, 4), 3.0))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 6.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
