use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position in the training run that drives dynamic outlier weighting.
///
/// Epochs are 0-indexed, so epoch 0 weights above- and below-threshold
/// activations equally and the operator starts out as average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    current_epoch: usize,
    total_epochs: usize,
}

impl Schedule {
    pub fn new(current_epoch: usize, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if current_epoch > total_epochs {
            return Err(Error::ScheduleExhausted {
                current: current_epoch,
                total: total_epochs,
            });
        }
        Ok(Schedule {
            current_epoch,
            total_epochs,
        })
    }

    /// Weights after the last epoch has completed: `(2, 0)`.
    pub fn finished(total_epochs: usize) -> Result<Self> {
        Schedule::new(total_epochs, total_epochs)
    }

    pub fn current_epoch(&self) -> usize {
        self.current_epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn progress(&self) -> f64 {
        self.current_epoch as f64 / self.total_epochs as f64
    }

    /// Weight on activations at or above the threshold.
    pub fn w1(&self) -> f64 {
        1.0 + self.progress()
    }

    /// Weight on activations below the threshold.
    pub fn w2(&self) -> f64 {
        1.0 - self.progress()
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.w1(), self.w2())
    }
}

pub fn schedule_weights(current_epoch: usize, total_epochs: usize) -> Result<(f64, f64)> {
    Schedule::new(current_epoch, total_epochs).map(|s| s.weights())
}
