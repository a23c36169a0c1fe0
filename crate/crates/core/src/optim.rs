//! Adam, used for pretraining weights, debias fine-tuning and scores.

use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(lr, &sizes)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates each parameter from its accumulated gradient and replaces it
    /// with a fresh trainable leaf. Parameters without a gradient keep their
    /// values but still get a fresh leaf, which clears any stale gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((param, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(grad) = param.grad() else {
                **param = param.with_requires_grad(true);
                continue;
            };
            let mut values = param.to_vec();
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                values[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            **param = Tensor::param(values, param.shape())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Tensor::param(vec![3.0, -2.0], &[2]).unwrap();
        let mut opt = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            x.square().sum().backward().unwrap();
            opt.step(&mut [&mut x]).unwrap();
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }
}
