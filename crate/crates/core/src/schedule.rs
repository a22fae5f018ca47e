//! Variance schedules for the forward process.
//!
//! All arrays are stored in `f64` and indexed by `t - 1` for timesteps
//! `t = 1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How σ_t is chosen for ancestral sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// σ_t² = β_t
    #[default]
    Beta,
    /// σ_t² = β̃_t, the variance of q(x_{t-1} | x_t, x_0)
    Posterior,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaMode::Beta),
            "posterior" => Ok(SigmaMode::Posterior),
            other => Err(Error::invalid("sigma_mode", format!("expected \"beta\" or \"posterior\", got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Linearly spaced β from `beta_start` to `beta_end` over `steps` points.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("T", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::invalid("beta_start", format!("must lie in (0, 1), got {beta_start}")));
    }
    if !(beta_end >= beta_start && beta_end < 1.0) {
        return Err(Error::invalid(
            "beta_end",
            format!("must lie in [beta_start, 1), got {beta_end}"),
        ));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| beta_start + i as f64 * step).collect()
    };
    Ok(NoiseSchedule::from_betas_unchecked(betas, beta_start, beta_end))
}

impl NoiseSchedule {
    /// Schedule from explicit β values, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("betas", "empty"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid("betas", format!("{b} outside (0, 1)")));
        }
        let (first, last) = (betas[0], betas[betas.len() - 1]);
        Ok(Self::from_betas_unchecked(betas, first, last))
    }

    fn from_betas_unchecked(betas: Vec<f64>, beta_start: f64, beta_end: f64) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        NoiseSchedule {
            steps: betas.len(),
            beta_start,
            beta_end,
            sigma_mode: SigmaMode::Beta,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        }
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Timestep { t, max: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Standard deviation of the noise injected by a reverse step at `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        match self.sigma_mode {
            SigmaMode::Beta => self.beta(t).sqrt(),
            SigmaMode::Posterior => self.posterior_vars[t - 1].sqrt(),
        }
    }
}

/// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t.
pub fn posterior_variance(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.check_t(t)?;
    Ok(schedule.posterior_vars[t - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints_and_interior() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_relative_eq!(s.beta(1000), 0.02, max_relative = 1e-14);
        // 1e-4 + (0.02 - 1e-4) / 999
        assert_relative_eq!(s.beta(2), 1.199_199_199_199e-4, max_relative = 1e-10);
    }

    #[test]
    fn two_step_products() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert_relative_eq!(s.alpha_bar(1), 0.9, max_relative = 1e-15);
        assert_relative_eq!(s.alpha_bar(2), 0.72, max_relative = 1e-15);
        assert_relative_eq!(posterior_variance(&s, 2).unwrap(), 0.1 / 0.28 * 0.2, max_relative = 1e-14);
        assert_relative_eq!(posterior_variance(&s, 2).unwrap(), 0.071_428_571_428_57, max_relative = 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.05, 0.05).unwrap();
        assert_eq!(s.betas(), &[0.05]);
        assert_eq!(posterior_variance(&s, 1).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_linear_schedule(10, f64::NAN, 0.5).is_err());
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        assert!(posterior_variance(&s, 0).is_err());
        assert!(posterior_variance(&s, 11).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn constant_beta_posterior_bounded() {
        let s = NoiseSchedule::from_betas(vec![0.01; 5000]).unwrap();
        assert!(posterior_variance(&s, 5000).unwrap() <= 0.01);
    }

    #[test]
    fn sigma_modes() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert_relative_eq!(s.sigma(2), 0.2f64.sqrt());
        let s = s.with_sigma_mode(SigmaMode::Posterior);
        assert_eq!(s.sigma(1), 0.0);
        assert_relative_eq!(s.sigma(2), (0.1f64 / 0.28 * 0.2).sqrt(), max_relative = 1e-14);
        assert_eq!("posterior".parse::<SigmaMode>().unwrap(), SigmaMode::Posterior);
        assert!("cosine".parse::<SigmaMode>().is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..1200, b0 in 1e-5f64..0.05, span in 0.0f64..0.2) {
            let b1 = (b0 + span).min(0.5);
            let s = make_linear_schedule(steps, b0, b1).unwrap();
            let mut acc = 1.0f64;
            for t in 1..=steps {
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                let ab = s.alpha_bar(t);
                prop_assert!(ab > 0.0 && ab < 1.0);
                if t >= 2 {
                    prop_assert!(ab < s.alpha_bar(t - 1));
                    prop_assert_eq!(ab, s.alpha_bar(t - 1) * s.alpha(t));
                }
                acc *= 1.0 - s.beta(t);
                prop_assert!(((acc - ab) / ab).abs() < 1e-12);
                let pv = posterior_variance(&s, t).unwrap();
                prop_assert!(pv >= 0.0 && pv <= s.beta(t));
            }
            prop_assert_eq!(posterior_variance(&s, 1).unwrap(), 0.0);
            let again = make_linear_schedule(steps, b0, b1).unwrap();
            prop_assert_eq!(
                s.betas().iter().map(|b| b.to_bits()).collect::<Vec<_>>(),
                again.betas().iter().map(|b| b.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
