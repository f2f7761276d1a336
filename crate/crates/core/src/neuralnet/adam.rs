//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, Network};
use super::tensor::{Scalar, Tensor3};
use super::{layers, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Elementwise Adam update for one tensor at (already incremented) `step`.
pub fn adam_update<T: Scalar>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) {
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (one - b1) * gi;
        *vi = b2 * *vi + (one - b2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *wi -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First/second moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &[&[T]]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        }
    }

    /// One optimizer step over every tensor. Increments the step counter once.
    pub fn apply(&mut self, params: Vec<&mut Vec<T>>, grads: &[Vec<T>], cfg: &AdamConfig) -> Result<(), NnError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(NnError::ShapeMismatch(format!("gradient tensor {i} has wrong size")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient tensor {i}")));
            }
        }
        self.step += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            adam_update(p, g, &mut self.m[i], &mut self.v[i], self.step, cfg);
        }
        Ok(())
    }
}

/// Network weights plus optimizer state: everything a reader mutates while
/// training.
#[derive(Debug, Clone)]
pub struct ModelState<T = f32> {
    pub network: Network<T>,
    pub adam: AdamState<T>,
    pub adam_cfg: AdamConfig,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self, NnError> {
        Ok(Self::from_network(Network::init(arch, seed)?))
    }

    pub fn from_network(network: Network<T>) -> Self {
        let adam = AdamState::zeros_like(&network.params());
        Self {
            network,
            adam,
            adam_cfg: AdamConfig::default(),
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        self.network.arch()
    }

    /// Forward, backward and one Adam step on a batch. Returns the loss.
    pub fn train_step(&mut self, x: Tensor3<T>, labels: &[usize]) -> Result<T, NnError> {
        let scores = self.network.forward(x)?;
        let (loss, grad) = layers::cross_entropy(&scores, labels, self.arch().num_classes)?;
        let grads = self.network.backward(&grad)?;
        let cfg = self.adam_cfg;
        self.adam.apply(self.network.params_mut(), &grads, &cfg)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar Adam, written out directly from the update rule.
    fn scalar_adam(w: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut w, mut m, mut v) = (w, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn first_step_from_zero() {
        let cfg = AdamConfig::default();
        let (mut w, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&mut w, &[1.0], &mut m, &mut v, 1, &cfg);
        let expected = scalar_adam(0.0, &[1.0], 1e-3, 0.9, 0.999, 1e-8);
        assert!((w[0] - expected).abs() < 1e-12);
        assert!((w[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = AdamConfig::default();
        let (mut w, mut m, mut v) = ([0.25f64, -1.0], [0.0; 2], [0.0; 2]);
        adam_update(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(w, [0.25, -1.0]);
    }

    #[test]
    fn multi_tensor_step_decomposes_elementwise() {
        let cfg = AdamConfig::default();
        let mut a = vec![0.5f64, -0.2, 0.1];
        let mut b = vec![1.5f64];
        let init_a = a.clone();
        let init_b = b.clone();
        let seq_a = [vec![0.3, -0.7, 2.0], vec![-0.1, 0.4, 0.0], vec![1.0, 1.0, -3.0]];
        let seq_b = [vec![0.9], vec![-0.9], vec![0.05]];
        let mut state = AdamState::zeros_like(&[a.as_slice(), b.as_slice()]);
        for (ga, gb) in seq_a.iter().zip(&seq_b) {
            state.apply(vec![&mut a, &mut b], &[ga.clone(), gb.clone()], &cfg).unwrap();
        }
        assert_eq!(state.step, 3);
        for i in 0..3 {
            let gs: Vec<f64> = seq_a.iter().map(|g| g[i]).collect();
            let expected = scalar_adam(init_a[i], &gs, 1e-3, 0.9, 0.999, 1e-8);
            assert!((a[i] - expected).abs() < 1e-12);
        }
        let gs: Vec<f64> = seq_b.iter().map(|g| g[0]).collect();
        assert!((b[0] - scalar_adam(init_b[0], &gs, 1e-3, 0.9, 0.999, 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let cfg = AdamConfig::default();
        let mut a = vec![1.0f64];
        let mut state = AdamState::zeros_like(&[a.as_slice()]);
        let err = state.apply(vec![&mut a], &[vec![f64::NAN]], &cfg);
        assert!(matches!(err, Err(NnError::NonFinite(_))));
        assert_eq!(state.step, 0);
        assert_eq!(a, vec![1.0]);
    }
}
