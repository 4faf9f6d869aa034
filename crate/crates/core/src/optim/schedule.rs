use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::NUM_GROUPS;

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a * (1.0 - f) + b * f
}

/// A single warmup/anneal cycle of learning rate with inverse momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycleSchedule {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub lr_max: f64,
    /// `lr_start = lr_max / div_factor`.
    pub div_factor: f64,
    pub mom_high: f64,
    pub mom_low: f64,
}

impl OneCycleSchedule {
    pub fn new(total_steps: u64, lr_max: f64) -> Result<Self> {
        let s = OneCycleSchedule {
            total_steps,
            warmup_fraction: 0.3,
            lr_max,
            div_factor: 10.0,
            mom_high: 0.95,
            mom_low: 0.85,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_warmup(mut self, warmup_fraction: f64) -> Result<Self> {
        self.warmup_fraction = warmup_fraction;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid(format!("warmup fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) || !(self.div_factor > 1.0) {
            return Err(Error::invalid("one-cycle needs lr_max > 0 and lr_start < lr_max"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("one-cycle needs at least one step"));
        }
        Ok(())
    }

    pub fn lr_start(&self) -> f64 {
        self.lr_max / self.div_factor
    }

    /// Position of the phase boundary, `p·T`.
    pub fn peak(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// `(lr, momentum)` at position `t ∈ [0, T]`; fractional positions are allowed.
    pub fn at(&self, t: f64) -> Result<(f64, f64)> {
        let total = self.total_steps as f64;
        if !(0.0..=total).contains(&t) {
            return Err(Error::invalid(format!("step {t} outside [0, {total}]")));
        }
        let peak = self.peak();
        if t < peak {
            let f = t / peak;
            Ok((lerp(self.lr_start(), self.lr_max, f), lerp(self.mom_high, self.mom_low, f)))
        } else {
            let s = (t - peak) / (total - peak);
            let c = (1.0 + (PI * s).cos()) / 2.0;
            Ok((self.lr_max * c, lerp(self.mom_high, self.mom_low, c)))
        }
    }
}

pub fn one_cycle_at(sched: &OneCycleSchedule, t: f64) -> Result<(f64, f64)> {
    sched.at(t)
}

/// Peak rate per layer group. Without an explicit vector, group 1 gets
/// `lr_max/100` and groups 2–4 get `0.3`, `0.6` and `1.0` × `lr_max`.
pub fn discriminative_groups(lr_max: f64, explicit: Option<[f64; NUM_GROUPS]>) -> Result<[f64; NUM_GROUPS]> {
    if !(lr_max > 0.0 && lr_max.is_finite()) {
        return Err(Error::invalid(format!("lr_max must be positive, got {lr_max}")));
    }
    match explicit {
        None => Ok([lr_max / 100.0, lr_max * 0.3, lr_max * 0.6, lr_max]),
        Some(v) => {
            if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::invalid(format!("group rates must be positive, got {v:?}")));
            }
            if v.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::invalid(format!("group rates must not decrease towards the head, got {v:?}")));
            }
            Ok(v)
        }
    }
}

/// How a stage's learning rate and momentum evolve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrPolicy {
    OneCycle { warmup_fraction: f64 },
    /// Fixed rate with `beta1` as the momentum.
    Constant,
}

/// Per-group rates and momentum at step `t` of a stage lasting `total` steps.
pub fn stage_rates(policy: LrPolicy, group_lrs: &[f64; NUM_GROUPS], beta1: f64, t: u64, total: u64) -> Result<([f64; NUM_GROUPS], f64)> {
    match policy {
        LrPolicy::Constant => Ok((*group_lrs, beta1)),
        LrPolicy::OneCycle { warmup_fraction } => {
            let top = group_lrs.iter().copied().fold(f64::MIN, f64::max);
            let sched = OneCycleSchedule::new(total, top)?.with_warmup(warmup_fraction)?;
            let (lr, mom) = sched.at(t as f64)?;
            Ok((group_lrs.map(|g| lr * (g / top)), mom))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(OneCycleSchedule::new(0, 0.01).is_err());
        assert!(OneCycleSchedule::new(10, -1.0).is_err());
        assert!(OneCycleSchedule::new(10, 0.01).unwrap().with_warmup(1.0).is_err());
        assert!(OneCycleSchedule::new(10, 0.01).unwrap().at(10.5).is_err());
        assert!(discriminative_groups(0.01, Some([0.1, 0.01, 0.1, 0.1])).is_err());
        assert!(discriminative_groups(0.0, None).is_err());
    }

    #[test]
    fn equal_explicit_rates_allowed() {
        assert_eq!(discriminative_groups(0.01, Some([0.01; 4])).unwrap(), [0.01; 4]);
    }
}
