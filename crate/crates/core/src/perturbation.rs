//! Server-side random perturbation directions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::scalar::Scalar;

/// Moment constants of a perturbation family: `E[phi_j^2] = beta1`, `|Phi| <= beta2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConstants {
    pub beta1: f64,
    pub beta2: f64,
}

/// Constants of the Rademacher family with entries `±1/sqrt(d)`.
pub fn perturbation_constants(d: usize) -> Result<PerturbationConstants> {
    if d == 0 {
        return Err(Error::config("perturbation dimension must be at least 1"));
    }
    Ok(PerturbationConstants { beta1: 1.0 / d as f64, beta2: 1.0 })
}

pub(crate) fn rademacher_with<T: Scalar, R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector<T> {
    let a = T::one() / T::of_usize(d).sqrt();
    Vector::from_vec((0..d).map(|_| if rng.random::<bool>() { a } else { -a }).collect())
}

/// Draws a perturbation vector with i.i.d. entries uniform on `{-1/sqrt(d), 1/sqrt(d)}`.
pub fn make_perturbation<T: Scalar>(d: usize, stream: &RngStream) -> Result<Vector<T>> {
    if d == 0 {
        return Err(Error::config("perturbation dimension must be at least 1"));
    }
    Ok(rademacher_with(d, &mut stream.rng()))
}
