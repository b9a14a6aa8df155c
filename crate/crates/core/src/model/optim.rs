//! SGD with Nesterov momentum, weight decay and polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::ParamStore;
use crate::model::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub poly_gamma: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            poly_gamma: 0.9,
        }
    }
}

/// `lr0 * (1 - step / total)^gamma`.
pub fn poly_lr(lr0: f64, step: u64, total_steps: u64, gamma: f64) -> f64 {
    let frac = 1.0 - step.min(total_steps) as f64 / total_steps.max(1) as f64;
    lr0 * frac.powf(gamma)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_parts(config: SgdConfig, velocity: Vec<Tensor<T>>) -> Self {
        Self { config, velocity }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// One update at `step` of a `total_steps` schedule; returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], step: u64, total_steps: u64) -> Result<f64> {
        if step >= total_steps {
            return Err(Error::InvalidArgument(format!("step {step} beyond schedule of {total_steps}")));
        }
        if grads.len() != self.velocity.len()
            || grads.iter().zip(&self.velocity).any(|(g, v)| g.shape() != v.shape())
            || params.tensors().len() != grads.len()
        {
            return Err(Error::shape("one gradient per parameter", format!("{} gradients", grads.len())));
        }
        let c = self.config;
        let lr = poly_lr(c.lr0, step, total_steps, c.poly_gamma);
        let (lr_t, mu, wd) = (T::of(lr), T::of(c.momentum), T::of(c.weight_decay));
        for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gr), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gr + wd * *w;
                *m = mu * *m + d;
                let upd = if c.nesterov { d + mu * *m } else { *m };
                *w = *w - lr_t * upd;
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::NetSpec;

    #[test]
    fn poly_lr_closed_forms() {
        assert_eq!(poly_lr(0.001, 0, 1000, 0.9), 0.001);
        let half = poly_lr(0.001, 500, 1000, 0.9);
        assert!((half - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((half - 5.359e-4).abs() < 1e-7);
        assert!((poly_lr(0.001, 999, 1000, 0.9) - 0.001 * (1.0f64 / 1000.0).powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let spec = NetSpec::default();
        let mut params = ParamStore::<f32>::init(&spec, 0).unwrap();
        let before = params.tensors().to_vec();
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        let mut opt = Sgd::new(cfg, &params);
        let grads: Vec<_> = before.iter().map(|t| Tensor::zeros(t.shape())).collect();
        opt.step(&mut params, &grads, 0, 10).unwrap();
        assert_eq!(params.tensors(), &before[..]);
        assert!(opt.step(&mut params, &grads, 10, 10).is_err());
    }

    #[test]
    fn nesterov_matches_hand_iteration() {
        let names = vec!["w".to_string()];
        let mut params = ParamStore::from_parts(names, vec![Tensor::<f64>::from_vec(&[1], vec![2.0]).unwrap()], 0).unwrap();
        let cfg = SgdConfig { lr0: 0.1, momentum: 0.9, nesterov: true, weight_decay: 0.01, poly_gamma: 1.0 };
        let mut opt = Sgd::new(cfg, &params);
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for step in 0..5 {
            let g = 2.0 * params.tensors()[0].data()[0];
            let lr = opt.step(&mut params, &[Tensor::from_vec(&[1], vec![g]).unwrap()], step, 10).unwrap();
            let d = 2.0 * w + 0.01 * w;
            v = 0.9 * v + d;
            w -= lr * (d + 0.9 * v);
            assert!((params.tensors()[0].data()[0] - w).abs() < 1e-15);
        }
        assert_eq!(params.version(), 5);
    }
}
