//! Noise schedules for the forward diffusion kernel.
//!
//! A schedule fixes the pair `(alpha_t, sigma_t)` of the Gaussian perturbation
//! kernel `q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)` on a time window
//! `[t_min, t_max]`, together with the matching linear-SDE coefficients
//!
//! ```text
//! f(t)   = d log alpha_t / dt
//! g^2(t) = d sigma_t^2 / dt - 2 f(t) sigma_t^2
//! ```
//!
//! so that `dx = f(t) x dt + g(t) dW` reproduces the kernel. Four standard
//! families are provided (VE, VP, sub-VP, and the EDM `sigma = scale * t`
//! parameterization). All coefficient formulas are closed form; no numeric
//! integration is involved.

use serde::{Deserialize, Serialize};

use crate::error::{DfError, Result};

/// Default lower end of the time window.
pub const DEFAULT_T_MIN: f64 = 1e-3;
/// Default upper end of the time window.
pub const DEFAULT_T_MAX: f64 = 1.0;
/// Default `beta_min` for the VP / sub-VP families.
pub const DEFAULT_BETA_MIN: f64 = 0.1;
/// Default `beta_max` for the VP / sub-VP families.
pub const DEFAULT_BETA_MAX: f64 = 20.0;
/// Default `sigma_min` for the VE family.
pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
/// Default `sigma_max` for the VE family.
pub const DEFAULT_SIGMA_MAX: f64 = 50.0;
/// Default time scale for the EDM family: `sigma(t) = 80 t` maps the usual
/// `sigma in [0, 80]` range onto the unit time window.
pub const DEFAULT_EDM_TIME_SCALE: f64 = 80.0;

/// The schedule family together with its shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Variance exploding: `alpha = 1`, `sigma(t) = sigma_min (sigma_max/sigma_min)^t`.
    Ve { sigma_min: f64, sigma_max: f64 },
    /// Variance preserving: `alpha(t) = exp(-1/2 int_0^t beta)`, `sigma^2 = 1 - alpha^2`
    /// with the linear ramp `beta(s) = beta_min + s (beta_max - beta_min)`.
    Vp { beta_min: f64, beta_max: f64 },
    /// Sub-VP: same `alpha` as VP but `sigma = 1 - alpha^2`.
    SubVp { beta_min: f64, beta_max: f64 },
    /// EDM: `alpha = 1`, `sigma(t) = time_scale * t` (zero drift).
    Edm { time_scale: f64 },
}

impl ScheduleKind {
    /// Short lowercase label used in CSV/JSON output.
    pub fn label(&self) -> &'static str {
        match self {
            ScheduleKind::Ve { .. } => "ve",
            ScheduleKind::Vp { .. } => "vp",
            ScheduleKind::SubVp { .. } => "subvp",
            ScheduleKind::Edm { .. } => "edm",
        }
    }
}

/// A schedule family restricted to a concrete time window.
///
/// All accessors come in a checked flavor returning [`Result`] and an
/// `_unchecked` flavor that assumes `t` was already validated (used in solver
/// hot loops after a single up-front [`NoiseSchedule::check_time`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    fn with_kind(kind: ScheduleKind) -> Self {
        Self {
            kind,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    /// VE schedule with explicit `sigma` range.
    pub fn ve(sigma_min: f64, sigma_max: f64) -> Self {
        assert!(
            sigma_min > 0.0 && sigma_max > sigma_min,
            "ve schedule requires 0 < sigma_min < sigma_max"
        );
        Self::with_kind(ScheduleKind::Ve {
            sigma_min,
            sigma_max,
        })
    }

    /// VE schedule with the standard `sigma in [0.01, 50]` range.
    pub fn ve_default() -> Self {
        Self::ve(DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX)
    }

    /// VP schedule with explicit `beta` ramp.
    pub fn vp(beta_min: f64, beta_max: f64) -> Self {
        assert!(
            beta_min > 0.0 && beta_max >= beta_min,
            "vp schedule requires 0 < beta_min <= beta_max"
        );
        Self::with_kind(ScheduleKind::Vp { beta_min, beta_max })
    }

    /// VP schedule with the standard `beta in [0.1, 20]` ramp.
    pub fn vp_default() -> Self {
        Self::vp(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }

    /// Sub-VP schedule with explicit `beta` ramp.
    pub fn sub_vp(beta_min: f64, beta_max: f64) -> Self {
        assert!(
            beta_min > 0.0 && beta_max >= beta_min,
            "subvp schedule requires 0 < beta_min <= beta_max"
        );
        Self::with_kind(ScheduleKind::SubVp { beta_min, beta_max })
    }

    /// Sub-VP schedule with the standard `beta in [0.1, 20]` ramp.
    pub fn sub_vp_default() -> Self {
        Self::sub_vp(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }

    /// EDM schedule `sigma(t) = 80 t` on the unit window, so the terminal
    /// noise level matches the customary `sigma_max = 80`.
    pub fn edm() -> Self {
        Self::edm_scaled(DEFAULT_EDM_TIME_SCALE)
    }

    /// EDM schedule with a custom time scale: `sigma(t) = time_scale * t`.
    /// `edm_scaled(1.0)` gives the identity parameterization `sigma(t) = t`.
    pub fn edm_scaled(time_scale: f64) -> Self {
        assert!(time_scale > 0.0, "edm time scale must be positive");
        Self::with_kind(ScheduleKind::Edm { time_scale })
    }

    /// Replace the time window, keeping the family and its parameters.
    pub fn with_time_range(mut self, t_min: f64, t_max: f64) -> Self {
        assert!(
            t_min > 0.0 && t_max > t_min,
            "time window requires 0 < t_min < t_max"
        );
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }

    /// Validate that `t` lies in the closed window `[t_min, t_max]`.
    pub fn check_time(&self, t: f64) -> Result<()> {
        if t.is_finite() && t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(DfError::TimeOutOfRange {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            })
        }
    }

    /// Integrated ramp `int_0^t beta(s) ds` for the VP / sub-VP families.
    fn beta_integral(beta_min: f64, beta_max: f64, t: f64) -> f64 {
        beta_min * t + 0.5 * (beta_max - beta_min) * t * t
    }

    fn beta_at(beta_min: f64, beta_max: f64, t: f64) -> f64 {
        beta_min + t * (beta_max - beta_min)
    }

    /// Signal coefficient `alpha_t`, assuming `t` is in range.
    pub fn alpha_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Ve { .. } | ScheduleKind::Edm { .. } => 1.0,
            ScheduleKind::Vp { beta_min, beta_max } | ScheduleKind::SubVp { beta_min, beta_max } => {
                (-0.5 * Self::beta_integral(beta_min, beta_max, t)).exp()
            }
        }
    }

    /// Noise level `sigma_t`, assuming `t` is in range.
    pub fn sigma_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => sigma_min * (t * (sigma_max / sigma_min).ln()).exp(),
            // 1 - exp(-B) evaluated as -expm1(-B) to keep precision near t = 0.
            ScheduleKind::Vp { beta_min, beta_max } => {
                (-(-Self::beta_integral(beta_min, beta_max, t)).exp_m1()).sqrt()
            }
            ScheduleKind::SubVp { beta_min, beta_max } => {
                -(-Self::beta_integral(beta_min, beta_max, t)).exp_m1()
            }
            ScheduleKind::Edm { time_scale } => time_scale * t,
        }
    }

    /// Drift coefficient `f(t) = d log alpha / dt`, assuming `t` is in range.
    pub fn drift_coeff_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Ve { .. } | ScheduleKind::Edm { .. } => 0.0,
            ScheduleKind::Vp { beta_min, beta_max } | ScheduleKind::SubVp { beta_min, beta_max } => {
                -0.5 * Self::beta_at(beta_min, beta_max, t)
            }
        }
    }

    /// Squared diffusion coefficient `g^2(t)`, assuming `t` is in range.
    pub fn diffusion_coeff_sq_unchecked(&self, t: f64) -> f64 {
        let g2 = match self.kind {
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                let s = self.sigma_unchecked(t);
                2.0 * (sigma_max / sigma_min).ln() * s * s
            }
            ScheduleKind::Vp { beta_min, beta_max } => Self::beta_at(beta_min, beta_max, t),
            ScheduleKind::SubVp { beta_min, beta_max } => {
                // beta (1 - alpha^4), with 1 - alpha^4 = -expm1(-2B).
                let b = Self::beta_integral(beta_min, beta_max, t);
                Self::beta_at(beta_min, beta_max, t) * (-(-2.0 * b).exp_m1())
            }
            ScheduleKind::Edm { time_scale } => 2.0 * time_scale * time_scale * t,
        };
        assert!(g2 >= 0.0, "schedule produced negative g^2 at t = {t}");
        g2
    }

    /// Checked signal coefficient `alpha_t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    /// Checked noise level `sigma_t`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.sigma_unchecked(t))
    }

    /// Checked drift coefficient `f(t)`.
    pub fn drift_coeff(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.drift_coeff_unchecked(t))
    }

    /// Checked squared diffusion coefficient `g^2(t)`.
    pub fn diffusion_coeff_sq(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.diffusion_coeff_sq_unchecked(t))
    }

    /// Log density of the terminal reference measure used for likelihood
    /// integration: the stationary prior `N(0, sigma_T^2 I)` for the
    /// zero-drift families (VE, EDM) and `N(0, I)` for VP / sub-VP.
    pub fn terminal_prior_log_density(&self, x: &ndarray::Array1<f64>) -> f64 {
        let var = match self.kind {
            ScheduleKind::Ve { .. } | ScheduleKind::Edm { .. } => {
                let s = self.sigma_unchecked(self.t_max);
                s * s
            }
            ScheduleKind::Vp { .. } | ScheduleKind::SubVp { .. } => 1.0,
        };
        let d = x.len() as f64;
        let sq = x.iter().map(|v| v * v).sum::<f64>();
        -0.5 * (d * (2.0 * std::f64::consts::PI * var).ln() + sq / var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn all_schedules() -> Vec<NoiseSchedule> {
        vec![
            NoiseSchedule::ve_default(),
            NoiseSchedule::vp_default(),
            NoiseSchedule::sub_vp_default(),
            NoiseSchedule::edm(),
        ]
    }

    #[test]
    fn ve_endpoints_match_parameters() {
        let s = NoiseSchedule::ve_default();
        assert_relative_eq!(s.sigma(1.0).unwrap(), 50.0, max_relative = 1e-12);
        // sigma(t_min) sits slightly above sigma_min because t_min > 0.
        assert!(s.sigma(s.t_min).unwrap() > 0.01);
        assert_eq!(s.alpha(0.5).unwrap(), 1.0);
        assert_eq!(s.drift_coeff(0.5).unwrap(), 0.0);
    }

    #[test]
    fn vp_alpha_matches_closed_form_at_terminal_time() {
        let s = NoiseSchedule::vp_default();
        // int_0^1 beta = 0.1 + 19.9 / 2 = 10.05, alpha(1) = exp(-5.025).
        assert_relative_eq!(s.alpha(1.0).unwrap(), (-5.025f64).exp(), max_relative = 1e-14);
        assert_abs_diff_eq!(s.alpha(1.0).unwrap(), 6.5715865e-3, epsilon = 1e-9);
        assert_abs_diff_eq!(s.sigma(1.0).unwrap(), 0.99998, epsilon = 1e-5);
        assert_relative_eq!(s.drift_coeff(0.5).unwrap(), -5.025, max_relative = 1e-14);
        assert_relative_eq!(
            s.diffusion_coeff_sq(0.25).unwrap(),
            0.1 + 0.25 * 19.9,
            max_relative = 1e-14
        );
    }

    #[test]
    fn vp_preserves_total_variance() {
        let s = NoiseSchedule::vp_default();
        for i in 0..200 {
            let t = s.t_min + (s.t_max - s.t_min) * (i as f64) / 199.0;
            let a = s.alpha_unchecked(t);
            let sig = s.sigma_unchecked(t);
            assert_abs_diff_eq!(a * a + sig * sig, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn subvp_sigma_is_one_minus_alpha_squared() {
        let s = NoiseSchedule::sub_vp_default();
        for i in 0..50 {
            let t = s.t_min + (s.t_max - s.t_min) * (i as f64) / 49.0;
            let a = s.alpha_unchecked(t);
            assert_abs_diff_eq!(s.sigma_unchecked(t), 1.0 - a * a, epsilon = 1e-14);
        }
    }

    #[test]
    fn edm_default_scale_hits_eighty_at_terminal_time() {
        let s = NoiseSchedule::edm();
        assert_relative_eq!(s.sigma(1.0).unwrap(), 80.0, max_relative = 1e-14);
        assert_eq!(s.alpha(0.7).unwrap(), 1.0);
        // The unit-scale variant is the identity map sigma(t) = t.
        let id = NoiseSchedule::edm_scaled(1.0);
        assert_relative_eq!(id.sigma(0.5).unwrap(), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let s = NoiseSchedule::ve_default();
        assert!(matches!(
            s.alpha(0.0),
            Err(DfError::TimeOutOfRange { .. })
        ));
        assert!(s.sigma(1.0 + 1e-9).is_err());
        assert!(s.drift_coeff(f64::NAN).is_err());
    }

    /// Central finite differences of the closed forms must agree with the
    /// analytic coefficient formulas.
    #[test]
    fn coefficients_match_finite_differences() {
        let h = 1e-6;
        for s in all_schedules() {
            for i in 0..40 {
                let t = (s.t_min + h) + (s.t_max - s.t_min - 2.0 * h) * (i as f64) / 39.0;
                let a_plus = s.alpha_unchecked(t + h);
                let a_minus = s.alpha_unchecked(t - h);
                let f_fd = (a_plus.ln() - a_minus.ln()) / (2.0 * h);
                let f = s.drift_coeff_unchecked(t);
                if f.abs() > 1e-12 {
                    assert_relative_eq!(f_fd, f, max_relative = 1e-5);
                } else {
                    assert_abs_diff_eq!(f_fd, 0.0, epsilon = 1e-7);
                }

                let sp = s.sigma_unchecked(t + h);
                let sm = s.sigma_unchecked(t - h);
                let dsigma2_fd = (sp * sp - sm * sm) / (2.0 * h);
                let sig = s.sigma_unchecked(t);
                let g2_fd = dsigma2_fd - 2.0 * f * sig * sig;
                assert_relative_eq!(
                    g2_fd,
                    s.diffusion_coeff_sq_unchecked(t),
                    max_relative = 1e-5
                );
            }
        }
    }

    #[test]
    fn sigma_is_strictly_increasing_and_g2_nonnegative() {
        for s in all_schedules() {
            let mut prev = 0.0;
            for i in 0..=500 {
                let t = s.t_min + (s.t_max - s.t_min) * (i as f64) / 500.0;
                let sig = s.sigma_unchecked(t);
                assert!(sig > prev, "sigma not increasing for {:?}", s.kind);
                assert!(s.diffusion_coeff_sq_unchecked(t) >= 0.0);
                prev = sig;
            }
        }
    }

    #[test]
    fn terminal_prior_is_standard_normal_for_vp() {
        let s = NoiseSchedule::vp_default();
        let x = ndarray::arr1(&[0.0, 0.0]);
        let expected = -(2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(s.terminal_prior_log_density(&x), expected, max_relative = 1e-14);
    }
}
