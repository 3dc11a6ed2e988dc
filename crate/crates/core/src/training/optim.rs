//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { config, t: 0, m: zeros(), v: zeros() }
    }

    /// One update with learning rate `lr`. Parameters without a gradient only decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let mut grad_of: Vec<Option<&Tensor<T>>> = vec![None; self.m.len()];
        for (id, g) in grads {
            let slot = grad_of
                .get_mut(id.index())
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {}", id.index())))?;
            *slot = Some(g);
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            p.data_mut().iter_mut().for_each(|w| *w *= decay);
            let Some(g) = grad_of[i] else { continue };
            p.check_same_shape(g)?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| {
            let f = v.to_f64_lossy();
            f * f
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        let g = Tensor::from_vec(&[2], vec![0.3, -2.0]).unwrap();
        opt.step(&mut store, &[(id, g)], 0.01).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-7);
        assert!((w[1] - (-1.0 + 0.01)).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[1], vec![2.0]).unwrap()).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[], 0.1).unwrap();
        assert!((store.get(id).data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![(ParamId(0), Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap())];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-12);
    }
}
