use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{BlockId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient added to the gradient as `weight_decay · θ`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for a subset of the blocks of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    blocks: Vec<BlockId>,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore, blocks: Vec<BlockId>) -> Self {
        let first: Vec<_> = blocks
            .iter()
            .map(|&id| Array2::zeros(params.get(id).raw_dim()))
            .collect();
        Self {
            config,
            second: first.clone(),
            first,
            blocks,
            step: 0,
        }
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of the owned blocks. Non-finite
    /// gradients leave parameters and moments untouched and return
    /// [`Error::Divergence`].
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for &id in &self.blocks {
            if params.get(id).dim() != grads.get(id).dim() {
                return Err(Error::dimension(
                    "adam gradient block",
                    format!("{:?}", params.get(id).dim()),
                    format!("{:?}", grads.get(id).dim()),
                ));
            }
        }
        if !grads.all_finite(&self.blocks) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, &id) in self.blocks.iter().enumerate() {
            Zip::from(params.get_mut(id))
                .and(grads.get(id))
                .and(&mut self.first[k])
                .and(&mut self.second[k])
                .for_each(|theta, &g, m, v| {
                    let g = g + weight_decay * *theta;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *theta -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_store(x: f64) -> (ParamStore, BlockId) {
        let mut p = ParamStore::new();
        let id = p.push("x", array![[x]]);
        (p, id)
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = ParamStore::new();
        p.push("w", array![[0.3, -1.2], [2.0, 0.0]]);
        let before = p.clone();
        let grads = p.zeros_like();
        let mut adam = AdamState::new(AdamConfig::default(), &p, p.ids().collect());
        for _ in 0..5 {
            adam.step(&mut p, &grads).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, id) = scalar_store(1.0);
        let mut g = p.zeros_like();
        g.get_mut(id)[[0, 0]] = 1.0;
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut adam = AdamState::new(cfg, &p, vec![id]);
        adam.step(&mut p, &g).unwrap();
        assert!((p.get(id)[[0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_shrinks_magnitude() {
        for start in [2.0, -2.0] {
            let (mut p, id) = scalar_store(start);
            let g = p.zeros_like();
            let cfg = AdamConfig {
                weight_decay: 0.1,
                ..Default::default()
            };
            let mut adam = AdamState::new(cfg, &p, vec![id]);
            let mut last = start.abs();
            for _ in 0..3 {
                adam.step(&mut p, &g).unwrap();
                let now = p.get(id)[[0, 0]].abs();
                assert!(now < last);
                last = now;
            }
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let (mut p, id) = scalar_store(1.0);
        let mut g = p.zeros_like();
        g.get_mut(id)[[0, 0]] = f64::NAN;
        let mut adam = AdamState::new(AdamConfig::default(), &p, vec![id]);
        assert!(matches!(adam.step(&mut p, &g), Err(Error::Divergence(_))));
        assert_eq!(p.get(id)[[0, 0]], 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn only_owned_blocks_change() {
        let mut p = ParamStore::new();
        let a = p.push("a", array![[1.0]]);
        let b = p.push("b", array![[1.0]]);
        let mut g = p.zeros_like();
        g.get_mut(a)[[0, 0]] = 1.0;
        g.get_mut(b)[[0, 0]] = 1.0;
        let mut adam = AdamState::new(AdamConfig::default(), &p, vec![a]);
        adam.step(&mut p, &g).unwrap();
        assert!(p.get(a)[[0, 0]] < 1.0);
        assert_eq!(p.get(b)[[0, 0]], 1.0);
    }
}
