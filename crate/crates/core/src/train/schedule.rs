use crate::error::{Error, Result};

/// Two-phase step learning rate: `base` until `drop_at`, then `base / 10`
/// until `total`. Positions are epochs for the paper recipe and optimisation
/// steps for the toy recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub drop_at: usize,
    pub total: usize,
    pub unit: ScheduleUnit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Epoch,
    Step,
}

impl LrSchedule {
    /// `base` for the first fifteen sixteenths of `total`, then `base / 10`.
    pub fn new(base: f64, total: usize, unit: ScheduleUnit) -> Self {
        Self {
            base,
            drop_at: total - total / 16,
            total,
            unit,
        }
    }

    /// 2e-4 for 150 epochs, then 2e-5 for the final 10.
    pub fn paper() -> Self {
        Self::new(2e-4, 160, ScheduleUnit::Epoch)
    }

    pub fn toy(base: f64, steps: usize) -> Self {
        Self::new(base, steps, ScheduleUnit::Step)
    }

    /// Rate at optimisation step `step` given the number of steps per epoch.
    pub fn at_step(&self, step: usize, steps_per_epoch: usize) -> Result<f64> {
        let position = match self.unit {
            ScheduleUnit::Step => step,
            ScheduleUnit::Epoch => step / steps_per_epoch.max(1),
        };
        lr_schedule(position, self)
    }
}

pub fn lr_schedule(position: usize, schedule: &LrSchedule) -> Result<f64> {
    if position >= schedule.total {
        return Err(Error::invalid(
            "lr_schedule",
            format!("{:?} {position} is beyond the configured {}", schedule.unit, schedule.total),
        ));
    }
    Ok(if position < schedule.drop_at {
        schedule.base
    } else {
        schedule.base / 10.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_recipe() {
        let s = LrSchedule::paper();
        assert_eq!(lr_schedule(0, &s).unwrap(), 2e-4);
        assert_eq!(lr_schedule(149, &s).unwrap(), 2e-4);
        assert!((lr_schedule(155, &s).unwrap() - 2e-5).abs() < 1e-20);
        assert!(lr_schedule(160, &s).is_err());
        assert_eq!(s.drop_at, 150);
        assert!((s.at_step(1500, 10).unwrap() - 2e-5).abs() < 1e-20);
    }

    #[test]
    fn toy_recipe() {
        let s = LrSchedule::toy(1e-3, 1600);
        assert_eq!(lr_schedule(1499, &s).unwrap(), 1e-3);
        assert_eq!(lr_schedule(1500, &s).unwrap(), 1e-4);
        assert!(lr_schedule(1600, &s).is_err());
    }
}
