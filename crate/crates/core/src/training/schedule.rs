//! Learning-rate schedules: triangular cyclical ramps and the one-cycle
//! policy, plus the optional inverse momentum cycle.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear ramp lr_min -> lr_max over the first half cycle, back down
    /// over the second, repeating.
    TriangularClr,
    /// A single ramp up then a linear anneal down to lr_min/10; flat at the
    /// floor afterwards.
    OneCycle,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "triangular" | "clr" | "triangular-clr" => Ok(ScheduleKind::TriangularClr),
            "one-cycle" | "onecycle" => Ok(ScheduleKind::OneCycle),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePolicy {
    pub kind: ScheduleKind,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Steps per cycle; 0 resolves to one epoch (triangular) or the whole
    /// phase (one-cycle) when training starts.
    pub cycle_length: usize,
    /// Optional (low, high) momentum bounds cycled inversely to the
    /// learning rate.
    pub momentum_range: Option<(f64, f64)>,
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        SchedulePolicy {
            kind: ScheduleKind::TriangularClr,
            lr_min: 1e-4,
            lr_max: 1e-3,
            cycle_length: 0,
            momentum_range: None,
        }
    }
}

impl SchedulePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_max, got [{}, {}]",
                self.lr_min, self.lr_max
            )));
        }
        if self.cycle_length == 1 {
            return Err(Error::Config("cycle_length must be 0 (auto) or >= 2".into()));
        }
        if let Some((lo, hi)) = self.momentum_range {
            if !(0.0 <= lo && lo <= hi && hi < 1.0) {
                return Err(Error::Config(format!(
                    "momentum range must satisfy 0 <= lo <= hi < 1, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Concrete cycle length given the phase geometry.
    pub fn resolve_cycle(&self, steps_per_epoch: usize, phase_steps: usize) -> usize {
        if self.cycle_length >= 2 {
            return self.cycle_length;
        }
        let auto = match self.kind {
            ScheduleKind::TriangularClr => steps_per_epoch,
            ScheduleKind::OneCycle => phase_steps,
        };
        auto.max(2)
    }
}

/// Learning rate at `step` (0-based) for a resolved cycle length.
pub fn schedule_lr(pol: &SchedulePolicy, cycle_length: usize, step: usize) -> f64 {
    debug_assert!(cycle_length >= 2);
    let span = pol.lr_max - pol.lr_min;
    let half = cycle_length as f64 / 2.0;
    match pol.kind {
        ScheduleKind::TriangularClr => {
            let t = (step % cycle_length) as f64;
            if t <= half {
                pol.lr_min + span * (t / half)
            } else {
                pol.lr_max - span * ((t - half) / half)
            }
        }
        ScheduleKind::OneCycle => {
            let floor = pol.lr_min / 10.0;
            if step >= cycle_length {
                return floor;
            }
            let t = step as f64;
            if t <= half {
                pol.lr_min + span * (t / half)
            } else {
                pol.lr_max - (pol.lr_max - floor) * ((t - half) / half)
            }
        }
    }
}

/// Momentum at `step`, cycled inversely to the learning rate: high when the
/// rate is low. Returns None when no momentum range is configured.
pub fn schedule_momentum(pol: &SchedulePolicy, cycle_length: usize, step: usize) -> Option<f64> {
    let (lo, hi) = pol.momentum_range?;
    let lr = schedule_lr(pol, cycle_length, step);
    let span = pol.lr_max - pol.lr_min;
    if span == 0.0 {
        return Some(hi);
    }
    let frac = ((lr - pol.lr_min) / span).clamp(0.0, 1.0);
    Some(hi - (hi - lo) * frac)
}
