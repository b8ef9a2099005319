//! Losses, optimizer and learning-rate schedule for the incremental and
//! rehearsal stages.

pub mod adam;
pub mod steps;

pub use adam::Adam;
pub use steps::{
    incremental_loss, incremental_step, rehearsal_loss, rehearsal_samples, rehearsal_step, IncrementalSample,
    LossBreakdown, LossVars, RehearsalSample,
};

use crate::error::{Error, Result};

/// Weights of the static (`alpha`) and temporal (`beta`) matching losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::config("alpha", "loss weights must be >= 0"));
        }
        Ok(Self { alpha, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainSchedule {
    /// Cosine decay from `base_lr` at epoch 0 to zero at epoch `epochs`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs.max(1) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = TrainSchedule {
            base_lr: 1e-3,
            epochs: 30,
            batch_size: 10,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!(s.lr(30).abs() < 1e-18);
        assert!((s.lr(15) - 5e-4).abs() < 1e-15);
        assert!((1..30).all(|e| s.lr(e) < s.lr(e - 1)));
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights::new(-0.1, 1.0).is_err());
        assert_eq!(LossWeights::default(), LossWeights::new(1.0, 1.0).unwrap());
    }
}
