//! Adam: per-parameter running first and second moment estimates with bias
//! correction.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::models::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &impl Parameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update using the gradients recorded on `g` for `vars`,
    /// which must line up with `params.tensors()`. Parameters that received
    /// no gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut impl Parameters, g: &Graph, vars: &[Var]) {
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        let tensors = params.tensors_mut();
        debug_assert_eq!(tensors.len(), vars.len());
        for (((t, v), m), s) in tensors.into_iter().zip(vars).zip(&mut self.first).zip(&mut self.second) {
            let grad = g.grad(*v);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let gi = grad.map_or(0.0, |gr| gr[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                s[i] = beta2 * s[i] + (1.0 - beta2) * gi * gi;
                *w -= learning_rate * (m[i] / c1) / ((s[i] / c2).sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Quadratic(Tensor);

    impl Parameters for Quadratic {
        fn tensors(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
        fn names(&self) -> Vec<String> {
            vec!["x".into()]
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = Quadratic(Tensor::vector(vec![2.0, -3.0]));
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut g = Graph::new();
        let x = g.param(p.0.clone()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        adam.step(&mut p, &g, &[x]);
        assert!((p.0.data()[0] - (2.0 - 1e-3)).abs() < 1e-9);
        assert!((p.0.data()[1] - (-3.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Quadratic(Tensor::vector(vec![1.0, -1.0, 0.5]));
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(p.0.clone()).unwrap();
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq).unwrap();
            g.backward(loss).unwrap();
            adam.step(&mut p, &g, &[x]);
        }
        assert!(p.0.data().iter().all(|v| v.abs() < 1e-2), "{:?}", p.0.data());
    }
}
