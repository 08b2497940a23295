use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// A named, mutable view of one parameter tensor.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
}

/// Momentum SGD: `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// moves, so a non-finite gradient leaves the parameters untouched; the
    /// error names the offending parameter.
    pub fn step(&mut self, params: Vec<ParamSlot<'_, T>>, grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.len() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter {} has {} values, gradient has {}",
                    p.name,
                    p.value.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: p.name.clone(),
                });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        let lr = T::from_f64(self.config.learning_rate);
        let mu = T::from_f64(self.config.momentum);
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for ((w, &gi), vi) in p.value.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot<'a>(name: &str, value: &'a mut [f64]) -> Vec<ParamSlot<'a, f64>> {
        vec![ParamSlot {
            name: name.into(),
            value,
        }]
    }

    #[test]
    fn plain_step() {
        let mut p = vec![1.0, 2.0];
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
        })
        .unwrap();
        sgd.step(slot("w", &mut p), &[vec![1.0, 1.0]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 1.9).abs() < 1e-15);
        sgd.step(slot("w", &mut p), &[vec![0.0, 0.0]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = g1 = 1, p1 = 1 - 0.1 = 0.9
        // v2 = 0.9 * 1 + 2 = 2.9, p2 = 0.9 - 0.29 = 0.61
        let mut p = vec![1.0];
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
        })
        .unwrap();
        sgd.step(slot("w", &mut p), &[vec![1.0]]).unwrap();
        sgd.step(slot("w", &mut p), &[vec![2.0]]).unwrap();
        assert!((p[0] - 0.61).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = vec![1.0];
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        let err = sgd
            .step(slot("head.weight", &mut p), &[vec![f64::NAN]])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref context } if context == "head.weight"));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn invalid_config() {
        assert!(Sgd::<f64>::new(SgdConfig {
            learning_rate: 0.0,
            momentum: 0.0
        })
        .is_err());
        assert!(Sgd::<f64>::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 1.0
        })
        .is_err());
    }
}
