//! Sigma schedules driving the smoothed optimizers.

use crate::error::{Error, Result};

/// The sequence `sigma_t` consumed one value per optimizer step (or per
/// outer iteration for SVRG). Steps are 1-indexed.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaSchedule {
    Constant(f64),
    /// `sigma_t = first * gamma^(t-1)`, strictly decreasing.
    Geometric { first: f64, gamma: f64 },
    Explicit { values: Vec<f64>, repeat_last: bool },
}

impl SigmaSchedule {
    pub fn constant(sigma: f64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "constant schedule needs sigma >= 0, got {sigma}"
            )));
        }
        Ok(SigmaSchedule::Constant(sigma))
    }

    pub fn geometric(first: f64, gamma: f64) -> Result<Self> {
        if first < 0.0 || !first.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "geometric schedule needs first >= 0, got {first}"
            )));
        }
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "geometric schedule needs gamma in (0,1), got {gamma}"
            )));
        }
        Ok(SigmaSchedule::Geometric { first, gamma })
    }

    pub fn explicit(values: Vec<f64>, repeat_last: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "explicit schedule needs at least one value".into(),
            ));
        }
        if let Some(bad) = values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "explicit schedule values must be >= 0, got {bad}"
            )));
        }
        Ok(SigmaSchedule::Explicit {
            values,
            repeat_last,
        })
    }

    /// `sigma_t` for `t >= 1`.
    pub fn value_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::InvalidArgument("schedule steps are 1-indexed".into()));
        }
        match self {
            SigmaSchedule::Constant(s) => Ok(*s),
            SigmaSchedule::Geometric { first, gamma } => Ok(first * gamma.powi(t as i32 - 1)),
            SigmaSchedule::Explicit {
                values,
                repeat_last,
            } => {
                if t <= values.len() {
                    Ok(values[t - 1])
                } else if *repeat_last {
                    Ok(*values.last().unwrap())
                } else {
                    Err(Error::ScheduleExhausted {
                        t,
                        len: values.len(),
                    })
                }
            }
        }
    }

    /// Steps where the schedule moves faster than the step size allows for
    /// the smoothed-Adam convergence condition
    /// `sqrt(|sigma_t^2 - sigma_{t+1}^2|) <= eta_t`. Advisory only: callers
    /// should warn, not fail.
    pub fn adam_condition_warnings<F: Fn(usize) -> f64>(
        &self,
        eta_at: F,
        horizon: usize,
    ) -> Vec<usize> {
        let mut bad = Vec::new();
        for t in 1..horizon {
            let (a, b) = match (self.value_at(t), self.value_at(t + 1)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => break,
            };
            if (a * a - b * b).abs().sqrt() > eta_at(t) {
                bad.push(t);
            }
        }
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_schedule() {
        let s = SigmaSchedule::constant(0.5).unwrap();
        for t in [1, 7, 1000] {
            assert_eq!(s.value_at(t).unwrap(), 0.5);
        }
    }

    #[test]
    fn geometric_schedule() {
        let s = SigmaSchedule::geometric(1.0, 0.5).unwrap();
        assert_eq!(s.value_at(3).unwrap(), 0.25);
        assert_eq!(s.value_at(1).unwrap(), 1.0);
        // strictly decreasing
        let mut prev = f64::INFINITY;
        for t in 1..20 {
            let v = s.value_at(t).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn explicit_schedule_and_exhaustion() {
        let s = SigmaSchedule::explicit(vec![1.0, 0.1, 0.01], false).unwrap();
        assert_eq!(s.value_at(2).unwrap(), 0.1);
        assert!(matches!(
            s.value_at(4),
            Err(Error::ScheduleExhausted { t: 4, len: 3 })
        ));
        let r = SigmaSchedule::explicit(vec![1.0, 0.1], true).unwrap();
        assert_eq!(r.value_at(9).unwrap(), 0.1);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(SigmaSchedule::constant(-0.1).is_err());
        assert!(SigmaSchedule::geometric(1.0, 1.0).is_err());
        assert!(SigmaSchedule::geometric(1.0, 0.0).is_err());
        assert!(SigmaSchedule::explicit(vec![], false).is_err());
        assert!(SigmaSchedule::explicit(vec![0.5, -1.0], false).is_err());
    }

    #[test]
    fn adam_condition_flags_fast_drops() {
        // sigma drops from 1 to 0 in one step: sqrt(1) = 1 > eta = 0.1
        let s = SigmaSchedule::explicit(vec![1.0, 0.0], true).unwrap();
        let bad = s.adam_condition_warnings(|_| 0.1, 10);
        assert_eq!(bad, vec![1]);
        // constant schedule never violates
        let c = SigmaSchedule::constant(0.7).unwrap();
        assert!(c.adam_condition_warnings(|_| 1e-9, 50).is_empty());
    }
}
