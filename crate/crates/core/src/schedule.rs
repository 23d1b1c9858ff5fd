//! Patch sampling schedules: global iteration → keep rate ρ.
//!
//! Linear and cyclic schedules are staircases of `num_levels` evenly spaced
//! values in `[rho_min, rho_max]`, each held for an equal share of the ramp.
//! Level `j` covers iterations with `floor(progress · num_levels) = j`, so a
//! boundary iteration belongs to the higher level and the last level is
//! exactly `rho_max`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sampling::KeepRate;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Baseline,
    Fixed,
    Linear,
    Cyclic,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Baseline => "baseline",
            ScheduleKind::Fixed => "fixed",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cyclic => "cyclic",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ScheduleKind::Baseline),
            "fixed" => Ok(ScheduleKind::Fixed),
            "linear" => Ok(ScheduleKind::Linear),
            "cyclic" => Ok(ScheduleKind::Cyclic),
            other => Err(Error::config("schedule", format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub rho_min: f64,
    pub rho_max: f64,
    pub num_levels: usize,
    pub iters_per_epoch: usize,
    pub total_epochs: usize,
}

pub const DEFAULT_LEVELS: usize = 9;

impl ScheduleSpec {
    pub fn baseline(iters_per_epoch: usize, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Baseline,
            rho_min: 1.0,
            rho_max: 1.0,
            num_levels: 1,
            iters_per_epoch,
            total_epochs,
        }
    }

    pub fn fixed(rho: f64, iters_per_epoch: usize, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Fixed,
            rho_min: rho,
            rho_max: rho,
            num_levels: 1,
            iters_per_epoch,
            total_epochs,
        }
    }

    pub fn linear(rho_min: f64, rho_max: f64, num_levels: usize, iters_per_epoch: usize, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            rho_min,
            rho_max,
            num_levels,
            iters_per_epoch,
            total_epochs,
        }
    }

    pub fn cyclic(rho_min: f64, rho_max: f64, num_levels: usize, iters_per_epoch: usize, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cyclic,
            ..Self::linear(rho_min, rho_max, num_levels, iters_per_epoch, total_epochs)
        }
    }

    pub fn total_iters(&self) -> usize {
        self.iters_per_epoch * self.total_epochs
    }

    pub fn validate(&self) -> Result<()> {
        KeepRate::new(self.rho_min).map_err(|e| Error::config("rho_min", e.to_string()))?;
        KeepRate::new(self.rho_max).map_err(|e| Error::config("rho_max", e.to_string()))?;
        if self.rho_min > self.rho_max {
            return Err(Error::config("rho_min", "must not exceed rho_max"));
        }
        if self.num_levels == 0 {
            return Err(Error::config("num_levels", "must be at least 1"));
        }
        if self.iters_per_epoch == 0 || self.total_epochs == 0 {
            return Err(Error::config("epochs", "schedule needs at least one iteration"));
        }
        match self.kind {
            ScheduleKind::Baseline if self.rho_min != 1.0 || self.rho_max != 1.0 => {
                Err(Error::config("rho_min", "baseline schedule keeps every patch (rho = 1)"))
            }
            ScheduleKind::Fixed if self.rho_min != self.rho_max => {
                Err(Error::config("rho_max", "fixed schedule needs rho_min == rho_max"))
            }
            ScheduleKind::Linear | ScheduleKind::Cyclic if self.rho_min < self.rho_max && self.num_levels < 2 => {
                Err(Error::config("num_levels", "a ramp needs at least 2 levels"))
            }
            _ => Ok(()),
        }
    }

    /// The `j`-th of the evenly spaced levels, rounded to 12 decimals so that
    /// decimal endpoints give decimal levels (0.2, 0.3, …).
    pub fn level(&self, j: usize) -> f64 {
        if self.num_levels < 2 {
            return self.rho_max;
        }
        let n = (self.num_levels - 1) as f64;
        let j = j.min(self.num_levels - 1) as f64;
        let v = (self.rho_min * (n - j) + self.rho_max * j) / n;
        (v * 1e12).round() / 1e12
    }

    /// Keep rate at `global_iter`, which must lie in `[0, e·T)`.
    pub fn rho_at(&self, global_iter: usize) -> Result<KeepRate> {
        let total = self.total_iters();
        if global_iter >= total {
            return Err(Error::Contract(format!(
                "iteration {global_iter} outside schedule of {total} iterations"
            )));
        }
        let rho = match self.kind {
            ScheduleKind::Baseline => 1.0,
            ScheduleKind::Fixed => self.rho_min,
            ScheduleKind::Linear => self.level(global_iter * self.num_levels / total),
            ScheduleKind::Cyclic => {
                let t = self.iters_per_epoch;
                self.level((global_iter % t) * self.num_levels / t)
            }
        };
        KeepRate::new(rho)
    }

    /// Mean ρ over one epoch (cyclic) or over the whole run (others).
    pub fn epoch_mean_rho(&self) -> Result<f64> {
        let span = match self.kind {
            ScheduleKind::Cyclic => self.iters_per_epoch,
            _ => self.total_iters(),
        };
        let mut sum = 0.0;
        for i in 0..span {
            sum += self.rho_at(i)?.get();
        }
        Ok(sum / span as f64)
    }
}
