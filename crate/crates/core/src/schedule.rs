//! Shift schedule shared by both residual chains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters that fully determine a [`Schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub kappa: f64,
    pub gamma: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 15,
            kappa: 2.0,
            gamma: 1.0,
        }
    }
}

/// Monotone shift sequence `β_0 = 0 < β_1 < … < β_T = 1` with noise scale `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    betas: Vec<f64>,
}

/// Coefficients of the Gaussian `q(z_{t-1} | z_t, z_0)` for either chain:
/// mean `state · z_t + clean · z_0`, isotropic `variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub state: f64,
    pub clean: f64,
    pub variance: f64,
}

impl Schedule {
    /// Power schedule `β_t = (t / T)^γ`.
    pub fn new(steps: usize, kappa: f64, gamma: f64) -> Result<Self> {
        Self::from_params(ScheduleParams {
            steps,
            kappa,
            gamma,
        })
    }

    pub fn from_params(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            kappa,
            gamma,
        } = params;
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::InvalidSchedule(format!("kappa must be positive, got {kappa}")));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidSchedule(format!("gamma must be positive, got {gamma}")));
        }
        let total = steps as f64;
        let betas: Vec<f64> = (0..=steps)
            .map(|t| {
                if t == steps {
                    1.0
                } else {
                    (t as f64 / total).powf(gamma)
                }
            })
            .collect();
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "gamma {gamma} with {steps} steps does not give a strictly increasing sequence"
            )));
        }
        Ok(Schedule { params, betas })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn kappa(&self) -> f64 {
        self.params.kappa
    }

    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    /// `β_0 ..= β_T`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(self.betas[t])
    }

    /// Increment `α_t = β_t − β_{t−1}` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.betas[t] - self.betas[t - 1])
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn posterior(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check(t, 1)?;
        Ok(posterior_coefficients(
            self.betas[t - 1],
            self.betas[t],
            self.params.kappa,
        ))
    }

    fn check(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.params.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.params.steps,
            });
        }
        Ok(())
    }
}

/// Closed-form posterior of one residual-shifting step given the clean endpoint.
///
/// The residual term cancels, so the result depends only on the two shift
/// levels and `κ`. With `beta_prev = 0` the posterior collapses onto the
/// clean estimate with zero variance.
pub fn posterior_coefficients(beta_prev: f64, beta: f64, kappa: f64) -> PosteriorCoefficients {
    let alpha = beta - beta_prev;
    let ratio = beta_prev / beta;
    PosteriorCoefficients {
        state: ratio,
        clean: alpha / beta,
        variance: kappa * kappa * ratio * alpha,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
        }};
    }

    #[test]
    fn linear_fifteen_steps() {
        let s = Schedule::new(15, 2.0, 1.0).unwrap();
        assert_close!(s.beta(1).unwrap(), 1.0 / 15.0, 1e-15);
        assert_eq!(s.beta(15).unwrap(), 1.0);
        assert_close!(s.alpha(1).unwrap(), 1.0 / 15.0, 1e-15);
        assert_close!(s.alpha(7).unwrap(), 1.0 / 15.0, 1e-15);
    }

    #[test]
    fn single_step() {
        let s = Schedule::new(1, 1.0, 1.0).unwrap();
        assert_eq!(s.betas(), &[0.0, 1.0]);
        assert_eq!(s.alpha(1).unwrap(), 1.0);
    }

    #[test]
    fn quadratic_four_steps() {
        let s = Schedule::new(4, 2.0, 2.0).unwrap();
        assert_eq!(s.betas(), &[0.0, 0.0625, 0.25, 0.5625, 1.0]);
        assert_eq!(s.alphas(), vec![0.0625, 0.1875, 0.3125, 0.4375]);
        assert_eq!(s.alpha(4).unwrap(), 0.4375);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Schedule::new(0, 1.0, 1.0).is_err());
        assert!(Schedule::new(5, 0.0, 1.0).is_err());
        assert!(Schedule::new(5, -1.0, 1.0).is_err());
        assert!(Schedule::new(5, 1.0, 0.0).is_err());
        assert!(Schedule::new(5, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn alpha_range_checked() {
        let s = Schedule::new(4, 1.0, 1.0).unwrap();
        assert!(s.alpha(0).is_err());
        assert!(s.alpha(5).is_err());
        assert!(s.posterior(0).is_err());
        assert!(s.beta(5).is_err());
    }

    #[test]
    fn posterior_scalar_case() {
        // β_t = 0.5, β_{t-1} = 0.25 at t = 2 of a linear T = 4 schedule.
        let s = Schedule::new(4, 2.0, 1.0).unwrap();
        let p = s.posterior(2).unwrap();
        assert_close!(p.state * 0.5 + p.clean * 0.2, 0.35, 1e-15);
        assert_close!(p.variance, 0.5, 1e-15);
    }

    #[test]
    fn posterior_first_step_collapses() {
        let s = Schedule::new(15, 2.0, 1.0).unwrap();
        let p = s.posterior(1).unwrap();
        assert_eq!(p.state, 0.0);
        assert_eq!(p.clean, 1.0);
        assert_eq!(p.variance, 0.0);
    }

    #[test]
    fn reverse_variance_at_last_step() {
        let s = Schedule::new(15, 2.0, 1.0).unwrap();
        let p = s.posterior(15).unwrap();
        assert_close!(p.variance, 4.0 * (14.0 / 15.0) * (1.0 / 15.0), 1e-12);
        assert_close!(p.variance, 0.2489, 1e-4);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partial_sums_reproduce_betas(steps in 1usize..200, kappa in 0.01f64..10.0, gamma in 0.2f64..4.0) {
                let s = Schedule::new(steps, kappa, gamma).unwrap();
                let mut acc = 0.0;
                for t in 1..=steps {
                    acc += s.alpha(t).unwrap();
                    prop_assert!((acc - s.beta(t).unwrap()).abs() <= 1e-12);
                    prop_assert!(s.beta(t - 1).unwrap() < s.beta(t).unwrap());
                    prop_assert!(s.alpha(t).unwrap() > 0.0);
                }
                prop_assert_eq!(s.betas()[0], 0.0);
                prop_assert_eq!(s.betas()[steps], 1.0);
                let again = Schedule::new(steps, kappa, gamma).unwrap();
                prop_assert_eq!(
                    s.betas().iter().map(|b| b.to_bits()).collect::<Vec<_>>(),
                    again.betas().iter().map(|b| b.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}
