//! Stochastic gradient descent with heavy-ball momentum.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`, with `v` starting at zero.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.momentum) || !(config.weight_decay >= 0.0) {
            return Err(Error::invalid("sgd config", alloc::format!("{config:?}")));
        }
        Ok(Sgd { config, velocity: Vec::new() })
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("gradients", alloc::format!("{} for {} params", grads.len(), params.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        }
        let lr = T::from_f64(self.config.lr);
        let mu = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        for ((w, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            if w.shape() != g.shape() {
                return Err(Error::shape("sgd", w.shape(), g.shape()));
            }
            for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + (g + wd * *w);
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_step_matches_closed_form() {
        // f(w) = 0.5 * |w - c|^2, gradient w - c
        let c = [1.5, -2.0, 0.25];
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::new([3], alloc::vec![0.3, 0.7, -1.1]).unwrap()).unwrap();
        let mut opt = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        let w0 = ps.tensors()[0].data().to_vec();
        let g0: Vec<f64> = w0.iter().zip(&c).map(|(w, c)| w - c).collect();
        opt.step(&mut ps, &[Tensor::new([3], g0.clone()).unwrap()]).unwrap();
        let w1 = ps.tensors()[0].data().to_vec();
        for i in 0..3 {
            assert!((w1[i] - (w0[i] - 0.1 * g0[i])).abs() < 1e-12);
        }
        let g1: Vec<f64> = w1.iter().zip(&c).map(|(w, c)| w - c).collect();
        opt.step(&mut ps, &[Tensor::new([3], g1.clone()).unwrap()]).unwrap();
        for i in 0..3 {
            let v = 0.9 * g0[i] + g1[i];
            assert!((ps.tensors()[0].data()[i] - (w1[i] - 0.1 * v)).abs() < 1e-12);
        }
    }
}
