//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::nets::ParamSet;
use crate::tensor::{Gradients, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter named in `grads`; other
    /// parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as tensors named `m/<param>` and `v/<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, m) in &self.m {
            out.push((format!("m/{k}"), Tensor::vector(m.clone())));
        }
        for (k, v) in &self.v {
            out.push((format!("v/{k}"), Tensor::vector(v.clone())));
        }
        out
    }

    pub fn restore(&mut self, step: u64, tensors: &[(String, Tensor)]) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m/") {
                self.m.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = k.strip_prefix("v/") {
                self.v.insert(name.to_string(), t.data().to_vec());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let grads = Gradients::from([("w".to_string(), Tensor::vector(vec![0.3, -5.0]))]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &grads);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![4.0]));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data()[0];
            let grads = Gradients::from([("w".to_string(), Tensor::vector(vec![2.0 * (w - 1.0)]))]);
            opt.step(&mut p, &grads);
        }
        assert!((p.get("w").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}
