//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimiser state: one first- and second-moment accumulator per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                &[params.len(), grads.len()],
                &[self.first.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor> {
        vec![Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = params();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, params());
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // At t=1, m̂ = g and v̂ = g², so the update is lr·g/(|g|+ε).
        let mut p = params();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = Tensor::vector(vec![3.0, -0.2, 1e-3]).unwrap();
        adam.step(&mut p, std::slice::from_ref(&g)).unwrap();
        for ((new, old), gv) in p[0].data().iter().zip(params()[0].data()).zip(g.data()) {
            let expected = 1e-3 * gv / (gv.abs() + 1e-8);
            assert!(((old - new) - expected).abs() < 1e-12);
            assert!((old - new).abs() <= 1e-3 + 1e-15);
        }
    }

    #[test]
    fn identical_state_gives_bitwise_identical_updates() {
        let g = [Tensor::vector(vec![0.3, -0.7, 2.0]).unwrap()];
        let mut p1 = params();
        let mut a1 = Adam::new(AdamConfig::default(), &p1);
        let mut p2 = params();
        let mut a2 = Adam::new(AdamConfig::default(), &p2);
        for _ in 0..5 {
            a1.step(&mut p1, &g).unwrap();
            a2.step(&mut p2, &g).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = params();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[Tensor::zeros(&[2])]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert_eq!(adam.step_count(), 0);
    }
}
