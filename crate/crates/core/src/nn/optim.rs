//! Adam with optional decoupled weight decay.

use super::net::Param;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` must match `params[i]` in length.
    pub fn update(&mut self, params: &mut [Param], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let w = &mut p.value.data[i];
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Value;

    fn param(v: f64) -> Vec<Param> {
        vec![Param { name: "w".into(), value: Value::scalar(v) }]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = param(1.0);
        let mut adam = Adam::new(0.1);
        adam.update(&mut p, &[vec![5.0]]);
        assert!((p[0].value.data[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = param(1.0);
        let mut adam = Adam::new(0.0);
        for _ in 0..5 {
            adam.update(&mut p, &[vec![3.0]]);
        }
        assert_eq!(p[0].value.data[0], 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = param(3.0);
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let g = 2.0 * p[0].value.data[0];
            adam.update(&mut p, &[vec![g]]);
        }
        assert!(p[0].value.data[0].abs() < 1e-2);
    }
}
