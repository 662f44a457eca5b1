//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { lr: 1e-2 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0 && eps > 0.0) {
                    return Err(Error::Config(format!("adam needs lr > 0 and eps > 0, got {lr}, {eps}")));
                }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                    return Err(Error::Config(format!(
                        "adam betas must lie in [0, 1), got {beta1}, {beta2}"
                    )));
                }
            }
            OptimizerConfig::Sgd { lr } => {
                if !(lr > 0.0) {
                    return Err(Error::Config(format!("sgd needs lr > 0, got {lr}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Applies one descent step in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { layer: "gradient" });
        }
        self.steps += 1;
        match self.cfg {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_closed_form() {
        let (lr, b1, b2, eps) = (0.01, 0.8, 0.9, 1e-8);
        let cfg = OptimizerConfig::Adam { lr, beta1: b1, beta2: b2, eps };
        let mut opt = Optimizer::new(cfg, 2);
        let mut p = vec![1.0, -2.0];
        let g1 = [0.5, -3.0];
        let g2 = [0.1, 4.0];
        opt.step(&mut p, &g1).unwrap();
        // first step moves every coordinate by lr * sign(g)
        for (i, g) in g1.iter().enumerate() {
            let m = (1.0 - b1) * g / (1.0 - b1);
            let v = (1.0 - b2) * g * g / (1.0 - b2);
            let expected = [1.0, -2.0][i] - lr * m / (v.sqrt() + eps);
            assert!((p[i] - expected).abs() < 1e-12);
        }
        let before = p.clone();
        opt.step(&mut p, &g2).unwrap();
        for i in 0..2 {
            let m = b1 * (1.0 - b1) * g1[i] + (1.0 - b1) * g2[i];
            let v = b2 * (1.0 - b2) * g1[i] * g1[i] + (1.0 - b2) * g2[i] * g2[i];
            let m_hat = m / (1.0 - b1 * b1);
            let v_hat = v / (1.0 - b2 * b2);
            let expected = before[i] - lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.5 }, 2);
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[2.0, -1.0]).unwrap();
        assert_eq!(p, vec![0.0, 1.5]);
    }

    #[test]
    fn rejects_non_finite_gradients_without_touching_params() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 2);
        let mut p = vec![1.0, 2.0];
        assert!(opt.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 1.0, eps: 1e-8 };
        assert!(bad.validate().is_err());
    }
}
