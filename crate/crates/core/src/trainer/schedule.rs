//! Epoch-level learning-rate schedule and the plateau / early-stop tracker.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Multiplier applied from the halfway epoch onward.
pub const BOOST_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub warmup: u32,
    /// Total epochs of the run; the boost starts at `ceil(epochs / 2)`.
    pub epochs: u32,
    pub boost: f64,
    pub min_lr: f64,
    /// Ignore warmup and boost and return the base rate as is.
    pub constant: bool,
}

impl Schedule {
    pub fn boost_epoch(&self) -> u32 {
        self.epochs.div_ceil(2)
    }
}

/// Rate for 1-indexed `epoch` given the current (plateau-adjusted) base rate:
/// `boost · base · min(epoch^-0.5, epoch · warmup^-1.5)`, floored at `min_lr`.
pub fn lr_at(epoch: u32, schedule: &Schedule, base: f64) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::contract("lr_at", "epochs are 1-indexed, got 0"));
    }
    if schedule.constant {
        return Ok(base);
    }
    if schedule.warmup == 0 {
        return Err(Error::contract("lr_at", "warmup must be at least 1"));
    }
    let e = epoch as f64;
    let w = schedule.warmup as f64;
    let factor = e.powf(-0.5).min(e * w.powf(-1.5));
    let boost = if epoch >= schedule.boost_epoch() { schedule.boost } else { 1.0 };
    Ok((boost * base * factor).max(schedule.min_lr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauAction {
    /// New best validation score.
    Improved,
    Continue,
    /// The base rate was just multiplied by the reduce factor.
    ReduceLr,
    Stop,
}

/// Tracks the best validation F1 and the counters behind plateau reduction and
/// early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauTracker {
    pub base_lr: f64,
    pub reduce_factor: f64,
    pub reduce_patience: usize,
    pub stop_patience: usize,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub best_epoch: Option<u32>,
    /// Epochs since the last improvement.
    pub since_best: usize,
    /// Epochs since the last improvement or reduction.
    pub since_reduce: usize,
}

impl PlateauTracker {
    pub fn new(base_lr: f64, reduce_factor: f64, reduce_patience: usize, stop_patience: usize, min_lr: f64) -> Self {
        PlateauTracker {
            base_lr,
            reduce_factor,
            reduce_patience,
            stop_patience,
            min_lr,
            best: None,
            best_epoch: None,
            since_best: 0,
            since_reduce: 0,
        }
    }

    pub fn observe(&mut self, epoch: u32, val_f1: f64) -> PlateauAction {
        if self.best.is_none_or(|b| val_f1 > b) {
            self.best = Some(val_f1);
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            self.since_reduce = 0;
            return PlateauAction::Improved;
        }
        self.since_best += 1;
        self.since_reduce += 1;
        if self.since_best >= self.stop_patience {
            return PlateauAction::Stop;
        }
        if self.since_reduce >= self.reduce_patience {
            self.since_reduce = 0;
            self.base_lr = (self.base_lr * self.reduce_factor).max(self.min_lr);
            return PlateauAction::ReduceLr;
        }
        PlateauAction::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_a() -> Schedule {
        Schedule {
            warmup: 5,
            epochs: 250,
            boost: BOOST_FACTOR,
            min_lr: 1e-5,
            constant: false,
        }
    }

    #[test]
    fn warmup_values() {
        let s = model_a();
        let e1 = lr_at(1, &s, 1e-3).unwrap();
        let e5 = lr_at(5, &s, 1e-3).unwrap();
        assert!((e1 - 1e-3 * 5f64.powf(-1.5)).abs() < 1e-12);
        assert!((e1 - 8.944e-5).abs() < 1e-8);
        assert!((e5 - 1e-3 / 5f64.sqrt()).abs() < 1e-12);
        assert!((e5 - 4.472e-4).abs() < 1e-7);
    }

    #[test]
    fn continuous_at_warmup() {
        let s = model_a();
        let w = s.warmup as f64;
        let left = w * w.powf(-1.5);
        let right = w.powf(-0.5);
        assert!((left - right).abs() < 1e-15);
        let below = lr_at(4, &s, 1e-3).unwrap();
        let at = lr_at(5, &s, 1e-3).unwrap();
        let above = lr_at(6, &s, 1e-3).unwrap();
        assert!(below < at && above < at);
    }

    #[test]
    fn boost_from_halfway() {
        let s = model_a();
        assert_eq!(s.boost_epoch(), 125);
        let before = lr_at(124, &s, 1e-3).unwrap();
        let at = lr_at(125, &s, 1e-3).unwrap();
        assert!((before - 1e-3 / 124f64.sqrt()).abs() < 1e-15);
        assert!((at - 1.5e-3 / 125f64.sqrt()).abs() < 1e-15);
        let odd = Schedule { epochs: 31, ..s };
        assert_eq!(odd.boost_epoch(), 16);
    }

    #[test]
    fn floor_and_constant() {
        let s = model_a();
        assert_eq!(lr_at(200, &s, 1e-6).unwrap(), 1e-5);
        let c = Schedule { constant: true, ..s };
        assert_eq!(lr_at(1, &c, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_at(300, &c, 1e-4).unwrap(), 1e-4);
    }

    #[test]
    fn epoch_zero_is_rejected() {
        assert!(lr_at(0, &model_a(), 1e-3).is_err());
    }

    #[test]
    fn improving_scores_never_reduce() {
        let mut t = PlateauTracker::new(1e-3, 0.5, 75, 125, 1e-5);
        for e in 1..=300 {
            assert_eq!(t.observe(e, e as f64), PlateauAction::Improved);
        }
        assert_eq!(t.base_lr, 1e-3);
    }

    #[test]
    fn flat_scores_reduce_then_stop() {
        let mut t = PlateauTracker::new(1e-3, 0.5, 75, 125, 1e-5);
        assert_eq!(t.observe(1, 0.5), PlateauAction::Improved);
        let mut reductions = 0;
        for e in 2..=76 {
            if t.observe(e, 0.5) == PlateauAction::ReduceLr {
                reductions += 1;
            }
        }
        assert_eq!(reductions, 1);
        assert_eq!(t.base_lr, 5e-4);
        let mut stopped_at = None;
        for e in 77..=200 {
            match t.observe(e, 0.5) {
                PlateauAction::Stop => {
                    stopped_at = Some(e);
                    break;
                }
                PlateauAction::ReduceLr => reductions += 1,
                _ => {}
            }
        }
        assert_eq!(stopped_at, Some(126));
        assert_eq!(reductions, 1);
        assert_eq!(t.best_epoch, Some(1));
    }

    #[test]
    fn reduction_respects_floor() {
        let mut t = PlateauTracker::new(1.5e-5, 0.5, 1, 100, 1e-5);
        t.observe(1, 0.1);
        t.observe(2, 0.1);
        assert_eq!(t.base_lr, 1e-5);
    }
}
