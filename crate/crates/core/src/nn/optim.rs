use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Global-norm gradient clip applied before every update.
pub const DEFAULT_MAX_GRAD_NORM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub max_grad_norm: Option<f64>,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate must be > 0, got {learning_rate}")));
        }
        Ok(Self {
            kind,
            learning_rate,
            max_grad_norm: Some(DEFAULT_MAX_GRAD_NORM),
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn without_clipping(mut self) -> Self {
        self.max_grad_norm = None;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to `params` in place.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::config(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::config(format!(
                    "parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pv, gv) in p.values_mut().iter_mut().zip(g.values()) {
                        *pv -= self.learning_rate * gv * scale;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.second_moment = self.first_moment.clone();
                } else if self.first_moment.len() != grads.len() {
                    return Err(Error::config("optimizer reused with a different parameter set"));
                }
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = self.first_moment[i].values_mut();
                    let v = self.second_moment[i].values_mut();
                    for (k, (pv, &gv)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                        let gs = gv * scale;
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gs;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gs * gs;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
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
    fn sgd_definition() {
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let mut p = Tensor::scalar(1.0);
        opt.step(vec![&mut p], &[Tensor::scalar(2.0)]).unwrap();
        assert!((p.values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.01).unwrap();
            let mut p = Tensor::row(vec![1.5, -2.0]);
            opt.step(vec![&mut p], &[Tensor::row(vec![0.0, 0.0])]).unwrap();
            assert_eq!(p.values(), &[1.5, -2.0]);
        }
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut opt = Optimizer::adam(0.001).unwrap();
        let mut p = Tensor::scalar(0.0);
        opt.step(vec![&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 -> Δ = lr / (1 + ε)
        let expected = -0.001 / (1.0 + ADAM_EPSILON);
        assert!((p.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let mut p = Tensor::row(vec![1.0, 2.0]);
        assert!(matches!(opt.step(vec![&mut p], &[Tensor::scalar(1.0)]), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        assert!(Optimizer::sgd(0.0).is_err());
        assert!(Optimizer::adam(-1.0).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut opt = Optimizer::sgd(1.0).unwrap();
        let mut p = Tensor::row(vec![0.0, 0.0]);
        opt.step(vec![&mut p], &[Tensor::row(vec![30.0, 40.0])]).unwrap();
        // norm 50 -> scaled to 10
        assert!((p.values()[0] + 6.0).abs() < 1e-12);
        assert!((p.values()[1] + 8.0).abs() < 1e-12);
    }
}
