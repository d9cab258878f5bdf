use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Forward-process variances `beta_t` for `t = 1..=T` and their cumulative
/// signal retention `alpha_bar_t = prod_{s<=t} (1 - beta_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(SpaError::InvalidRange("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_start > beta_end {
            return Err(SpaError::InvalidRange(format!(
                "need 0 <= beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Ok(Self::from_betas(betas))
    }

    pub(crate) fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t`, 1-based, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(SpaError::StepOutOfRange { step: t, min, max: self.steps() });
        }
        Ok(())
    }

    /// Coefficients `(c0, ct, var)` of the Gaussian posterior
    /// `q(H_{t-1} | H_t, H_0) = N(c0 H_0 + ct H_t, var I)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let beta = self.beta(t);
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            // beta_s = 0 for all s <= t: the forward process is the identity.
            return (1.0, 0.0, 0.0);
        }
        let c0 = beta * ab_prev.sqrt() / denom;
        let ct = (1.0 - ab_prev) * (1.0 - beta).sqrt() / denom;
        let var = beta * (1.0 - ab_prev) / denom;
        (c0, ct, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::build(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn zero_betas_are_identity() {
        let s = NoiseSchedule::build(10, 0.0, 0.0, ScheduleKind::Linear).unwrap();
        assert!(s.alpha_bars().iter().all(|&a| a == 1.0));
        assert_eq!(s.posterior(3), (1.0, 0.0, 0.0));
    }

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::build(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(100) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_ranges() {
        assert!(NoiseSchedule::build(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(5, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(5, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(5, -0.1, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn first_step_posterior_returns_the_clean_estimate() {
        let s = NoiseSchedule::build(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let (c0, ct, var) = s.posterior(1);
        assert!((c0 - 1.0).abs() < 1e-12 && ct.abs() < 1e-12 && var.abs() < 1e-12);
    }
}
