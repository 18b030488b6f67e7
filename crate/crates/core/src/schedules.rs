//! Power-law step sizes `alpha_k = alpha0 (1+k)^-upsilon1` and
//! `gamma_k = gamma0 (1+k)^-upsilon2`, plus their validity conditions.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams<T> {
    pub alpha0: T,
    pub upsilon1: T,
    pub gamma0: T,
    pub upsilon2: T,
}

impl ScheduleParams<f64> {
    /// Exponents `(1/2 + eps/2, 1/6 + eps/2)` that trade rate for constants.
    pub fn rate_exponents(alpha0: f64, gamma0: f64, eps: f64) -> Self {
        ScheduleParams { alpha0, upsilon1: 0.5 + eps / 2.0, gamma0, upsilon2: 1.0 / 6.0 + eps / 2.0 }
    }
}

impl Default for ScheduleParams<f64> {
    fn default() -> Self {
        ScheduleParams { alpha0: 0.5, upsilon1: 0.51, gamma0: 2.5, upsilon2: 0.18 }
    }
}

impl<T: Scalar> ScheduleParams<T> {
    pub fn alpha(&self, k: u64) -> T {
        alpha(self, k)
    }

    pub fn gamma(&self, k: u64) -> T {
        gamma(self, k)
    }

    pub fn cast<U: Scalar>(&self) -> ScheduleParams<U> {
        ScheduleParams {
            alpha0: U::of(self.alpha0.as_f64()),
            upsilon1: U::of(self.upsilon1.as_f64()),
            gamma0: U::of(self.gamma0.as_f64()),
            upsilon2: U::of(self.upsilon2.as_f64()),
        }
    }
}

fn power_law<T: Scalar>(scale: T, exponent: T, k: u64) -> T {
    scale * (T::one() + T::of(k as f64)).powf(-exponent)
}

pub fn alpha<T: Scalar>(params: &ScheduleParams<T>, k: u64) -> T {
    power_law(params.alpha0, params.upsilon1, k)
}

pub fn gamma<T: Scalar>(params: &ScheduleParams<T>, k: u64) -> T {
    power_law(params.gamma0, params.upsilon2, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleViolation {
    NonPositiveConstant,
    Upsilon1NotPositive,
    Upsilon2NotPositive,
    Upsilon1NotAboveHalf,
    /// `upsilon1 + 3 upsilon2 > 1` fails.
    CubicSeriesDiverges,
    /// `0 < upsilon1 + upsilon2 <= 1` fails.
    ProductSeriesConverges,
}

/// Outcome of [`validate_schedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub violations: Vec<ScheduleViolation>,
    /// Whether the strict condition `upsilon1 + upsilon2 < 1` of the rate bound holds.
    pub rate_condition: bool,
}

impl ScheduleReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_schedule<T: Scalar>(params: &ScheduleParams<T>) -> ScheduleReport {
    let u1 = params.upsilon1.as_f64();
    let u2 = params.upsilon2.as_f64();
    let mut violations = Vec::new();
    if !(params.alpha0 > T::zero() && params.gamma0 > T::zero()) {
        violations.push(ScheduleViolation::NonPositiveConstant);
    }
    if u1 <= 0.0 {
        violations.push(ScheduleViolation::Upsilon1NotPositive);
    }
    if u2 <= 0.0 {
        violations.push(ScheduleViolation::Upsilon2NotPositive);
    }
    if u1 <= 0.5 {
        violations.push(ScheduleViolation::Upsilon1NotAboveHalf);
    }
    if u1 + 3.0 * u2 <= 1.0 {
        violations.push(ScheduleViolation::CubicSeriesDiverges);
    }
    if !(u1 + u2 > 0.0 && u1 + u2 <= 1.0) {
        violations.push(ScheduleViolation::ProductSeriesConverges);
    }
    ScheduleReport { violations, rate_condition: u1 + u2 < 1.0 }
}

/// Partial sums `sum_{k<=K} alpha_k gamma_k`, `sum alpha_k gamma_k^3`, `sum alpha_k^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesSums {
    pub alpha_gamma: f64,
    pub alpha_gamma_cubed: f64,
    pub alpha_squared: f64,
}

pub fn series_partial_sums(params: &ScheduleParams<f64>, last: u64) -> SeriesSums {
    let mut s = SeriesSums { alpha_gamma: 0.0, alpha_gamma_cubed: 0.0, alpha_squared: 0.0 };
    for k in 0..=last {
        let a = params.alpha(k);
        let g = params.gamma(k);
        s.alpha_gamma += a * g;
        s.alpha_gamma_cubed += a * g * g * g;
        s.alpha_squared += a * a;
    }
    s
}

/// Integral-comparison bounds on the partial sums up to `last`: upper bounds
/// for the two convergent series and a lower bound for the divergent one.
/// Only meaningful for valid schedules with `upsilon1 + upsilon2 < 1`.
pub fn series_bounds(params: &ScheduleParams<f64>, last: u64) -> SeriesSums {
    let ScheduleParams { alpha0, upsilon1: u1, gamma0, upsilon2: u2 } = *params;
    let cubic = u1 + 3.0 * u2;
    let product = 1.0 - u1 - u2;
    SeriesSums {
        alpha_gamma: alpha0 * gamma0 / product * ((last as f64 + 2.0).powf(product) - 1.0),
        alpha_gamma_cubed: alpha0 * gamma0.powi(3) * cubic / (cubic - 1.0),
        alpha_squared: alpha0 * alpha0 * 2.0 * u1 / (2.0 * u1 - 1.0),
    }
}
