//! Adam, cosine annealing with warm restarts, and the training loop.

mod adam;
mod schedule;
mod train;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use adam::Adam;
pub use schedule::{Cawrs, LrSchedule};
pub use train::{fit, mean_loss, EpochRecord, FitOutputs, FitReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Cosine annealing with warm restarts.
    Cawrs,
    Constant,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cawrs => "cawrs",
            ScheduleKind::Constant => "constant",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cawrs" => Ok(ScheduleKind::Cawrs),
            "constant" => Ok(ScheduleKind::Constant),
            _ => Err(Error::Config(format!("schedule must be cawrs or constant, got {s:?}"))),
        }
    }
}

/// Complete training recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: ScheduleKind,
    /// Steps in the first restart cycle; `None` means one epoch of steps.
    pub t0: Option<usize>,
    pub t_mult: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_max: 1e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: ScheduleKind::Cawrs,
            t0: None,
            t_mult: 2,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return bad("learning rates must satisfy 0 <= lr_min <= lr_max, lr_max > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.t0 == Some(0) {
            return bad("t0 must be >= 1");
        }
        if self.t_mult == 0 {
            return bad("t_mult must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }

    /// The configured schedule, with `steps_per_epoch` filling in a missing `t0`.
    pub fn lr_schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant(self.lr_max),
            ScheduleKind::Cawrs => LrSchedule::Cawrs(Cawrs::new(
                self.lr_max,
                self.lr_min,
                self.t0.unwrap_or(steps_per_epoch.max(1)),
                self.t_mult,
            )),
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("lr_max".into(), self.lr_max.to_string()),
            ("lr_min".into(), self.lr_min.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("adam_eps".into(), self.adam_eps.to_string()),
            ("schedule".into(), self.schedule.to_string()),
            ("t0".into(), self.t0.map_or_else(|| "epoch".into(), |t| t.to_string())),
            ("t_mult".into(), self.t_mult.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ]
    }

    /// Sets one field by key. Returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "lr_max" | "lr" => self.lr_max = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "t0" => {
                self.t0 = match value {
                    "epoch" => None,
                    v => Some(num(key, v)?),
                }
            }
            "t_mult" => self.t_mult = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
