use std::collections::BTreeMap;

use crate::model::ParamKey;
use crate::tensor::Tensor;

/// Per-parameter first-order update rule.
pub trait Optimizer {
    /// Called once before the updates of a step.
    fn begin_step(&mut self);
    fn update(&mut self, key: ParamKey, param: &mut Tensor, grad: &Tensor, lr: f64);
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<ParamKey, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, key: ParamKey, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(key)
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let t = self.step.max(1);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn begin_step(&mut self) {}

    fn update(&mut self, _key: ParamKey, param: &mut Tensor, grad: &Tensor, lr: f64) {
        for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= lr * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_untouched() {
        let mut adam = Adam::default();
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        adam.begin_step();
        adam.update(ParamKey::HeadBias, &mut p, &Tensor::zeros(&[3]), 1e-3);
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut adam = Adam::default();
        let mut p = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        adam.begin_step();
        adam.update(ParamKey::HeadBias, &mut p, &Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap(), 0.1);
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
        assert!((p.data()[1] - 0.1).abs() < 1e-6);
    }
}
