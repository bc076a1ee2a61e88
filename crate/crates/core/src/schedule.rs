//! Noise schedules `alpha(t)`: the fraction of signal retained at time `t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha(t) = 1 - t`.
    LogLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Lower clamp for stochastically drawn times.
    pub t_min: f64,
    /// Upper clamp for stochastically drawn times.
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::LogLinear, t_min: 1e-5, t_max: 1.0 - 1e-5 }
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t_min) || !(t_min < t_max && t_max <= 1.0) {
            return domain(format!("invalid clamp interval [{t_min}, {t_max}]"));
        }
        Ok(Self { kind, t_min, t_max })
    }

    pub fn log_linear() -> Self {
        Self::default()
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_unit(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LogLinear => 1.0 - t,
        }
    }

    /// `d alpha / dt`, defined on the open interval `(0, 1)`.
    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return domain(format!("alpha' needs t in (0, 1), got {t}"));
        }
        Ok(self.alpha_prime_unchecked(t))
    }

    pub(crate) fn alpha_prime_unchecked(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LogLinear => -1.0,
        }
    }

    /// `alpha(t) / alpha(s)` for `s <= t`.
    pub fn alpha_ratio(&self, t: f64, s: f64) -> Result<f64> {
        check_unit(t)?;
        check_unit(s)?;
        if s > t {
            return domain(format!("alpha ratio needs s <= t, got s={s}, t={t}"));
        }
        let a_s = self.alpha_unchecked(s);
        if a_s <= 0.0 {
            return domain(format!("alpha({s}) = 0; ratio undefined"));
        }
        Ok(self.alpha_unchecked(t) / a_s)
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }

    /// Uniform draw on `[t_min, t_max]`.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.t_min + (self.t_max - self.t_min) * rng.gen::<f64>()
    }
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return domain(format!("time {t} outside [0, 1]"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values() {
        let s = NoiseSchedule::log_linear();
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert_eq!(s.alpha(0.25).unwrap(), 0.75);
        assert!(s.alpha(-0.1).is_err());
        assert!(s.alpha(1.1).is_err());
    }

    #[test]
    fn derivative_matches_central_difference() {
        let s = NoiseSchedule::log_linear();
        assert_eq!(s.alpha_prime(0.5).unwrap(), -1.0);
        assert_eq!(s.alpha_prime(0.01).unwrap(), -1.0);
        assert!(s.alpha_prime(0.0).is_err());
        let h = 1e-6;
        for &t in &[0.01, 0.3, 0.5, 0.77, 0.99] {
            let fd = (s.alpha(t + h).unwrap() - s.alpha(t - h).unwrap()) / (2.0 * h);
            assert!((fd - s.alpha_prime(t).unwrap()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn ratio_examples() {
        let s = NoiseSchedule::log_linear();
        assert!((s.alpha_ratio(0.5, 0.25).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.alpha_ratio(0.4, 0.4).unwrap(), 1.0);
        assert_eq!(s.alpha_ratio(1.0, 0.5).unwrap(), 0.0);
        assert!(s.alpha_ratio(0.2, 0.5).is_err());
        assert!(s.alpha_ratio(1.0, 1.0).is_err());
    }

    #[test]
    fn strictly_decreasing_on_grid() {
        let s = NoiseSchedule::log_linear();
        let grid: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        for w in grid.windows(2) {
            assert!(s.alpha(w[1]).unwrap() < s.alpha(w[0]).unwrap());
        }
        for &t in &grid[1..999] {
            assert!(s.alpha_prime(t).unwrap() < 0.0);
        }
        for i in 0..999 {
            for j in (i + 1)..1000 {
                if (i * 7 + j) % 97 != 0 {
                    continue;
                }
                let (sv, tv) = (grid[i], grid[j]);
                let prod = s.alpha_ratio(tv, sv).unwrap() * s.alpha(sv).unwrap();
                assert!((prod - s.alpha(tv).unwrap()).abs() < 1e-14);
            }
        }
    }
}
