use serde::{Deserialize, Serialize};

use super::model::{Gradients, Mlp};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one model; the moment tensors mirror [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &Mlp, config: AdamConfig) -> Self {
        Self::for_sizes(model.params().iter().map(|p| p.len()), config)
    }

    pub fn for_sizes(sizes: impl IntoIterator<Item = usize>, config: AdamConfig) -> Self {
        let first: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// entry is non-finite or shapes disagree.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Gradients) -> Result<()> {
        if params.len() != self.first.len() || grads.tensors.len() != self.first.len() {
            return Err(Error::Dimension {
                context: "adam tensor count",
                expected: self.first.len(),
                actual: params.len().min(grads.tensors.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::Dimension {
                    context: "adam tensor shape",
                    expected: self.first[i].len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(i));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((param, g), (m, v)) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((p, &g), m), v) in param.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `base · factor^floor(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-5,
            factor: 0.5,
            every: 20,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64) -> AdamState {
        AdamState::for_sizes([1], AdamConfig { lr, ..Default::default() })
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut state = scalar_state(0.1);
        let mut p = [3.0];
        state.step(vec![&mut p], &Gradients { tensors: vec![vec![0.0]] }).unwrap();
        assert_eq!(p, [3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_scalar_hand_computation() {
        // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g² -> Δ = -lr g / (|g| + eps)
        let (lr, g) = (0.01, -0.37);
        let mut state = scalar_state(lr);
        let mut p = [1.0];
        state.step(vec![&mut p], &Gradients { tensors: vec![vec![g]] }).unwrap();
        let expected = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut state = scalar_state(0.001);
        let mut p = [0.0];
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            state.step(vec![&mut p], &Gradients { tensors: vec![vec![2.5]] }).unwrap();
            last = before - p[0];
        }
        assert!((last - 0.001).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut state = AdamState::for_sizes([2], AdamConfig::default());
        let mut p = [1.0, 2.0];
        let err = state.step(vec![&mut p], &Gradients { tensors: vec![vec![0.1, f64::NAN]] });
        assert!(matches!(err, Err(Error::NonFiniteGradient(0))));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn schedule_halves_every_twenty_epochs() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 1e-5);
        assert_eq!(s.lr(19), 1e-5);
        assert_eq!(s.lr(20), 5e-6);
        assert_eq!(s.lr(40), 2.5e-6);
    }
}
