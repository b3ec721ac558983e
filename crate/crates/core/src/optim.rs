//! First-order optimizers over lists of arrays.

use aal_tensor::Array;
use serde::{Deserialize, Serialize};

/// SGD with classical momentum: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((x, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *x -= self.lr * *vi;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (x, &gj)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![Array::new(vec![2], vec![1.0, 2.0])];
        let g = vec![Array::new(vec![2], vec![0.5, -0.5])];
        Sgd::new(0.0, 0.9).step(&mut p, &g);
        Adam::new(0.0).step(&mut p, &g);
        assert_eq!(p[0].data, vec![1.0, 2.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![Array::new(vec![2], vec![1.0, 2.0])];
        let g = vec![Array::new(vec![2], vec![0.5, -3.0])];
        Adam::new(0.01).step(&mut p, &g);
        assert!((p[0].data[0] - 0.99).abs() < 1e-9);
        assert!((p[0].data[1] - 2.01).abs() < 1e-9);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![Array::new(vec![1], vec![0.0])];
        let g = vec![Array::new(vec![1], vec![1.0])];
        let mut sgd = Sgd::new(0.1, 0.5);
        sgd.step(&mut p, &g);
        sgd.step(&mut p, &g);
        assert!((p[0].data[0] + 0.25).abs() < 1e-12);
    }
}
