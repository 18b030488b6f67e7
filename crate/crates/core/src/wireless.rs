//! Scalar fading-channel model: `received = h * sent + n`, with consecutive
//! uplink slots of the same device sharing autocovariance `k_hh`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, RngStream};
use crate::scalar::Scalar;

/// Relative rounding slack when comparing `k_hh` with `sigma_h^2`.
fn ulp_slack<T: Scalar>() -> T {
    T::of(4.0) * T::epsilon()
}

/// Channel statistics shared by every device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams<T> {
    /// Standard deviation of each channel coefficient.
    pub sigma_h: T,
    /// Autocovariance `E[h_k h_{k+1}]` of two consecutive slots.
    pub k_hh: T,
    /// Standard deviation of the additive receiver noise.
    pub sigma_n: T,
}

impl<T: Scalar> ChannelParams<T> {
    pub fn new(sigma_h: T, k_hh: T, sigma_n: T) -> Result<Self> {
        let p = ChannelParams { sigma_h, k_hh, sigma_n };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_h.is_finite() && self.sigma_h > T::zero()) {
            return Err(Error::config(format!("sigma_h must be positive and finite, got {}", self.sigma_h)));
        }
        if !(self.sigma_n.is_finite() && self.sigma_n >= T::zero()) {
            return Err(Error::config(format!("sigma_n must be non-negative and finite, got {}", self.sigma_n)));
        }
        if !(self.k_hh.is_finite() && self.k_hh > T::zero()) {
            return Err(Error::config(format!("k_hh must be positive, got {}", self.k_hh)));
        }
        if self.k_hh > self.sigma_h * self.sigma_h * (T::one() + ulp_slack::<T>()) {
            return Err(Error::Domain(format!(
                "k_hh = {} exceeds sigma_h^2 = {}",
                self.k_hh,
                self.sigma_h * self.sigma_h
            )));
        }
        Ok(())
    }

    /// Correlation coefficient of consecutive slots, `k_hh / sigma_h^2`,
    /// snapped to exactly 1 when rounding alone separates them.
    pub fn correlation(&self) -> T {
        let rho = self.k_hh / (self.sigma_h * self.sigma_h);
        if (rho - T::one()).abs() <= ulp_slack::<T>() {
            T::one()
        } else {
            rho
        }
    }

    pub fn noise_variance(&self) -> T {
        self.sigma_n * self.sigma_n
    }

    pub fn cast<U: Scalar>(&self) -> ChannelParams<U> {
        ChannelParams {
            sigma_h: U::of(self.sigma_h.as_f64()),
            k_hh: U::of(self.k_hh.as_f64()),
            sigma_n: U::of(self.sigma_n.as_f64()),
        }
    }
}

impl Default for ChannelParams<f64> {
    fn default() -> Self {
        ChannelParams { sigma_h: 1.0, k_hh: 0.5, sigma_n: 0.5 }
    }
}

/// One round's channel coefficients and noise for all devices.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw<T> {
    /// Coefficients of the first (pilot) uplink slot.
    pub h_first: Vec<T>,
    /// Coefficients of the second (loss) uplink slot.
    pub h_second: Vec<T>,
    pub n_first: Vec<T>,
    pub n_second: Vec<T>,
}

impl<T: Scalar> ChannelDraw<T> {
    pub fn devices(&self) -> usize {
        self.h_first.len()
    }
}

/// How channel coefficients evolve across rounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Fresh pair per round; only the two slots within a round are correlated.
    #[default]
    PerRound,
    /// One AR(1) process per device running through every slot of the run.
    Ar1,
}

fn correlated_next<T: Scalar, R: Rng + ?Sized>(prev: T, rho: T, innovation_scale: T, sigma_h: T, rng: &mut R) -> T {
    rho * prev + innovation_scale * sigma_h * standard_normal::<T, _>(rng)
}

/// Draws one round of channels from `rng`, optionally continuing from the
/// previous slot's coefficients (AR(1) mode).
pub fn draw_round_channels_with<T: Scalar, R: Rng + ?Sized>(
    params: &ChannelParams<T>,
    n_devices: usize,
    previous: Option<&[T]>,
    rng: &mut R,
) -> ChannelDraw<T> {
    let rho = params.correlation();
    let innovation = (T::one() - rho * rho).max(T::zero()).sqrt();
    let h_first: Vec<T> = match previous {
        Some(prev) => prev
            .iter()
            .map(|&p| correlated_next(p, rho, innovation, params.sigma_h, rng))
            .collect(),
        None => (0..n_devices).map(|_| params.sigma_h * standard_normal::<T, _>(rng)).collect(),
    };
    let h_second: Vec<T> = h_first
        .iter()
        .map(|&h| correlated_next(h, rho, innovation, params.sigma_h, rng))
        .collect();
    let n_first = (0..n_devices).map(|_| params.sigma_n * standard_normal::<T, _>(rng)).collect();
    let n_second = (0..n_devices).map(|_| params.sigma_n * standard_normal::<T, _>(rng)).collect();
    ChannelDraw { h_first, h_second, n_first, n_second }
}

/// Draws a fresh, independent round of channels for `n_devices` devices.
pub fn draw_round_channels<T: Scalar>(
    params: &ChannelParams<T>,
    n_devices: usize,
    stream: &RngStream,
) -> Result<ChannelDraw<T>> {
    params.validate()?;
    if n_devices == 0 {
        return Err(Error::config("at least one device is required"));
    }
    Ok(draw_round_channels_with(params, n_devices, None, &mut stream.rng()))
}

/// Stateful channel source for a whole run.
#[derive(Clone, Debug)]
pub struct ChannelProcess<T> {
    params: ChannelParams<T>,
    mode: ChannelMode,
    n_devices: usize,
    last_slot: Option<Vec<T>>,
}

impl<T: Scalar> ChannelProcess<T> {
    pub fn new(params: ChannelParams<T>, mode: ChannelMode, n_devices: usize) -> Result<Self> {
        params.validate()?;
        if n_devices == 0 {
            return Err(Error::config("at least one device is required"));
        }
        Ok(ChannelProcess { params, mode, n_devices, last_slot: None })
    }

    pub fn params(&self) -> &ChannelParams<T> {
        &self.params
    }

    pub fn next_round<R: Rng + ?Sized>(&mut self, rng: &mut R) -> ChannelDraw<T> {
        match self.mode {
            ChannelMode::PerRound => draw_round_channels_with(&self.params, self.n_devices, None, rng),
            ChannelMode::Ar1 => {
                let draw = draw_round_channels_with(&self.params, self.n_devices, self.last_slot.as_deref(), rng);
                self.last_slot = Some(draw.h_second.clone());
                draw
            }
        }
    }
}

/// Scalar channel: `h * value + n`.
pub fn uplink_scalar<T: Scalar>(value: T, h: T, n: T) -> T {
    h * value + n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sigma_h: f64, k_hh: f64, sigma_n: f64) -> ChannelParams<f64> {
        ChannelParams::new(sigma_h, k_hh, sigma_n).unwrap()
    }

    #[test]
    fn fully_correlated_slots_are_identical() {
        let p = params(1.3, 1.69, 0.2);
        let draw = draw_round_channels(&p, 50, &RngStream::new(1)).unwrap();
        assert_eq!(draw.h_first, draw.h_second);
    }

    #[test]
    fn zero_noise_gives_zero_noise_draws() {
        let p = params(1.0, 0.5, 0.0);
        let draw = draw_round_channels(&p, 20, &RngStream::new(3)).unwrap();
        assert!(draw.n_first.iter().chain(&draw.n_second).all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(matches!(ChannelParams::new(1.0, 1.5, 0.1), Err(Error::Domain(_))));
        assert!(matches!(ChannelParams::new(0.0, 0.0, 0.1), Err(Error::Config(_))));
        assert!(matches!(ChannelParams::new(1.0, 0.5, -0.1), Err(Error::Config(_))));
        assert!(draw_round_channels(&params(1.0, 0.5, 0.1), 0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn uplink_arithmetic() {
        assert!((uplink_scalar(1.0f64, 0.3, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(uplink_scalar(2.75, 1.0, 0.0), 2.75);
        assert_eq!(uplink_scalar(1.0, 2.0, -0.5), 1.5);
    }

    struct Moments {
        n: f64,
        sum: f64,
        sum_sq: f64,
    }

    impl Moments {
        fn new() -> Self {
            Moments { n: 0.0, sum: 0.0, sum_sq: 0.0 }
        }
        fn push(&mut self, v: f64) {
            self.n += 1.0;
            self.sum += v;
            self.sum_sq += v * v;
        }
        fn mean(&self) -> f64 {
            self.sum / self.n
        }
        fn stderr(&self) -> f64 {
            let m = self.mean();
            ((self.sum_sq / self.n - m * m) / self.n).sqrt()
        }
    }

    #[test]
    fn second_order_statistics_over_many_rounds() {
        let p = params(1.0, 0.5, 0.5);
        let mut rng = RngStream::new(99).rng();
        let (mut cross, mut var1, mut var2, mut dev, mut noise) =
            (Moments::new(), Moments::new(), Moments::new(), Moments::new(), Moments::new());
        for _ in 0..1_000_000 {
            let d = draw_round_channels_with(&p, 2, None, &mut rng);
            cross.push(d.h_first[0] * d.h_second[0]);
            var1.push(d.h_first[0] * d.h_first[0]);
            var2.push(d.h_second[0] * d.h_second[0]);
            dev.push(d.h_first[0] * d.h_first[1]);
            noise.push(d.n_first[0] * d.n_second[0]);
        }
        assert!((cross.mean() - 0.5).abs() < 0.004, "K_hh {}", cross.mean());
        assert!((var1.mean() - 1.0).abs() <= 3.0 * var1.stderr());
        assert!((var2.mean() - 1.0).abs() <= 3.0 * var2.stderr());
        assert!(dev.mean().abs() <= 3.0 * dev.stderr());
        assert!(noise.mean().abs() <= 3.0 * noise.stderr());
    }

    #[test]
    fn ar1_mode_preserves_marginal_and_chains_slots() {
        let p = params(1.0, 0.5, 0.0);
        let mut process = ChannelProcess::new(p, ChannelMode::Ar1, 1).unwrap();
        let mut rng = RngStream::new(5).rng();
        let mut var = Moments::new();
        let mut across = Moments::new();
        let mut prev_second = None;
        for _ in 0..200_000 {
            let d = process.next_round(&mut rng);
            var.push(d.h_first[0] * d.h_first[0]);
            if let Some(h) = prev_second {
                across.push(h * d.h_first[0]);
            }
            prev_second = Some(d.h_second[0]);
        }
        assert!((var.mean() - 1.0).abs() <= 3.0 * var.stderr());
        assert!((across.mean() - 0.5).abs() <= 3.0 * across.stderr());
    }
}
