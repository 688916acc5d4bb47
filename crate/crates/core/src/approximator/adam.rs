use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Every gradient component is clipped to `[-clip, clip]`.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            clip: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.clip > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam with element-wise gradient clipping. Minimizes: callers ascending an
/// objective pass the negated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig, params: usize) -> Adam {
        Adam {
            config,
            m: vec![0.0; params],
            v: vec![0.0; params],
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer sized for {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let c = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i].clamp(-c.clip, c.clip);
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_components_are_clipped_before_moments() {
        let mut adam = Adam::new(OptimizerConfig::default(), 2);
        let mut p = [0.0, 0.0];
        adam.step(&mut p, &[100.0, -3.0]).unwrap();
        let (m, v) = adam.moments();
        assert!((m[0] - 0.1 * 10.0).abs() < 1e-15);
        assert!((v[0] - 0.001 * 100.0).abs() < 1e-15);
        assert!((m[1] + 0.1 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(OptimizerConfig::default(), 3);
        let mut p = [1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        let mut adam = Adam::new(OptimizerConfig::default(), 2);
        let mut p = [0.0, 0.0];
        assert!(matches!(
            adam.step(&mut p, &[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(adam.step(&mut p, &[0.0]).is_err());
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let config = OptimizerConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(config, 1);
        let mut theta = [1.0];
        let mut reached = None;
        for step in 1..=200 {
            let g = 2.0 * theta[0];
            adam.step(&mut theta, &[g]).unwrap();
            if theta[0].abs() < 0.01 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "theta = {}", theta[0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
