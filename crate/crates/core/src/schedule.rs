//! Epoch-indexed schedules: step learning rates and the balance-factor ramp.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Piecewise-constant learning rate: `values[k]` applies from
/// `boundaries[k - 1]` (inclusive) up to `boundaries[k]`.
///
/// Values are listed explicitly rather than derived by repeated
/// multiplication so each phase is exactly the configured literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLr {
    pub boundaries: Vec<usize>,
    pub values: Vec<f64>,
}

impl StepLr {
    pub fn new(boundaries: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let schedule = StepLr { boundaries, values };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.boundaries.len() + 1 {
            return Err(Error::Config("a step schedule needs one more value than boundaries".into()));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("schedule boundaries must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let phase = self.boundaries.iter().take_while(|&&b| epoch >= b).count();
        self.values[phase]
    }

    /// Rescales the boundaries from a `from_total`-epoch run to `to_total`.
    pub fn scaled(&self, from_total: usize, to_total: usize) -> StepLr {
        StepLr {
            boundaries: self
                .boundaries
                .iter()
                .map(|&b| scale_epoch(b, from_total, to_total))
                .collect(),
            values: self.values.clone(),
        }
    }
}

/// Maps an epoch index between runs of different length, rounding to the
/// nearest epoch.
pub fn scale_epoch(epoch: usize, from_total: usize, to_total: usize) -> usize {
    (epoch * to_total + from_total / 2) / from_total
}

/// Balance-factor ramp: zero before `warmup_end`, linear up to `lambda_max`
/// at `ramp_end`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSchedule {
    pub warmup_end: usize,
    pub ramp_end: usize,
    pub total: usize,
    pub lambda_max: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        RampSchedule {
            warmup_end: 30,
            ramp_end: 90,
            total: 120,
            lambda_max: 10.0,
        }
    }
}

impl RampSchedule {
    /// Same proportions as `self`, stretched to `total` epochs.
    pub fn scaled(&self, total: usize) -> RampSchedule {
        RampSchedule {
            warmup_end: scale_epoch(self.warmup_end, self.total, total),
            ramp_end: scale_epoch(self.ramp_end, self.total, total),
            total,
            lambda_max: self.lambda_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_end < self.ramp_end && self.ramp_end <= self.total) {
            return Err(Error::Config(
                "ramp schedule needs warmup_end < ramp_end <= total".into(),
            ));
        }
        if !(self.lambda_max >= 0.0) {
            return Err(Error::Config("lambda_max must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total
            )));
        }
        Ok(if epoch < self.warmup_end {
            0.0
        } else if epoch < self.ramp_end {
            self.lambda_max * (epoch - self.warmup_end) as f64 / (self.ramp_end - self.warmup_end) as f64
        } else {
            self.lambda_max
        })
    }
}

/// How the contrastive weight evolves during GeCo training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Ramp(RampSchedule),
    Fixed { lambda: f64 },
}

impl LambdaSchedule {
    pub fn lambda_at(&self, epoch: usize) -> Result<f64> {
        match self {
            LambdaSchedule::Ramp(ramp) => ramp.lambda_at(epoch),
            LambdaSchedule::Fixed { lambda } => Ok(*lambda),
        }
    }

    /// Short human-readable name used in ablation reports.
    pub fn label(&self) -> String {
        match self {
            LambdaSchedule::Ramp(_) => "with lambda ramp-up".to_string(),
            LambdaSchedule::Fixed { lambda } => format!("lambda={lambda}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_values() {
        let ramp = RampSchedule::default();
        assert_eq!(ramp.lambda_at(0).unwrap(), 0.0);
        assert_eq!(ramp.lambda_at(29).unwrap(), 0.0);
        assert_eq!(ramp.lambda_at(30).unwrap(), 0.0);
        assert_eq!(ramp.lambda_at(60).unwrap(), 5.0);
        assert_eq!(ramp.lambda_at(90).unwrap(), 10.0);
        assert_eq!(ramp.lambda_at(119).unwrap(), 10.0);
        assert!(ramp.lambda_at(120).is_err());
    }

    #[test]
    fn ramp_is_monotone() {
        let ramp = RampSchedule::default();
        let values: Vec<f64> = (0..120).map(|e| ramp.lambda_at(e).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn scaled_ramp_keeps_proportions() {
        let ramp = RampSchedule::default().scaled(24);
        assert_eq!((ramp.warmup_end, ramp.ramp_end, ramp.total), (6, 18, 24));
        let lr = StepLr::new(vec![50, 90], vec![0.1, 0.01, 0.001]).unwrap().scaled(120, 24);
        assert_eq!(lr.boundaries, vec![10, 18]);
        let pae = StepLr::new(vec![30], vec![1e-3, 1e-4]).unwrap().scaled(60, 12);
        assert_eq!(pae.boundaries, vec![6]);
    }

    #[test]
    fn step_lr_phases() {
        let lr = StepLr::new(vec![50, 90], vec![0.1, 0.01, 0.001]).unwrap();
        assert_eq!(lr.at(0), 0.1);
        assert_eq!(lr.at(49), 0.1);
        assert_eq!(lr.at(50), 0.01);
        assert_eq!(lr.at(89), 0.01);
        assert_eq!(lr.at(90), 0.001);
        assert!(StepLr::new(vec![5], vec![1.0]).is_err());
    }
}
