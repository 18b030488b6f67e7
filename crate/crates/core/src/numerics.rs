//! Dense vectors, reproducible random streams and finite-difference oracles.

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default central-difference step for unit-scale problems in double precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A dense real vector of fixed length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![T::zero(); len])
    }

    pub fn filled(len: usize, value: T) -> Self {
        Vector(vec![value; len])
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        Vector(values)
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Vector(values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.as_f64()).collect()
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(Error::Dimension { expected, found: self.len() })
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        other.check_len(self.len())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> T {
        self.0.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, a: T) -> Self {
        Vector(self.0.iter().map(|&v| a * v).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        axpy(-T::one(), other, self)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        axpy(T::one(), other, self)
    }

    /// In-place `self += a * x`.
    pub fn add_scaled(&mut self, a: T, x: &Self) -> Result<()> {
        x.check_len(self.len())?;
        for (y, &xv) in self.0.iter_mut().zip(&x.0) {
            *y += a * xv;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Vector<U> {
        Vector(self.0.iter().map(|&v| U::of(v.as_f64())).collect())
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Vector(v)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Returns `a * x + y`.
pub fn axpy<T: Scalar>(a: T, x: &Vector<T>, y: &Vector<T>) -> Result<Vector<T>> {
    x.check_len(y.len())?;
    Ok(Vector(x.0.iter().zip(&y.0).map(|(&xv, &yv)| a * xv + yv).collect()))
}

/// Labels used to derive independent substreams from one experiment seed.
pub mod tags {
    pub const INIT: u64 = 0x494e_4954;
    pub const DATA: u64 = 0x4441_5441;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const TEST_SET: u64 = 0x5445_5354;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const BASELINE: u64 = 0x4241_5345;
    pub const CHANNEL: u64 = 0x4348_414e;
    pub const PERTURBATION: u64 = 0x5048_4900;
    pub const BATCH: u64 = 0x4241_5443;
    pub const DOWNLINK: u64 = 0x444f_574e;
    pub const ANALYSIS: u64 = 0x414e_4c59;
}

/// A named random substream: identical `(seed, path)` pairs give identical draws.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, path: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn child(&self, label: u64) -> Self {
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(label);
        RngStream { seed: self.seed, path }
    }

    pub fn children(&self, labels: &[u64]) -> Self {
        let mut s = self.clone();
        s.path.extend_from_slice(labels);
        s
    }

    /// Instantiates the generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.path.len() as u64).to_le_bytes());
        for label in &self.path {
            hasher.update(label.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}

/// `n` i.i.d. standard normal samples from `stream`.
pub fn draw_standard_normal(stream: &RngStream, n: usize) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub(crate) fn standard_normal<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

/// Central-difference gradient of `f` at `theta` with step `eps`.
pub fn finite_difference_gradient<T, F>(f: F, theta: &Vector<T>, eps: T) -> Result<Vector<T>>
where
    T: Scalar,
    F: Fn(&Vector<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let two_eps = eps + eps;
    let mut probe = theta.clone();
    let mut grad = Vector::zeros(theta.len());
    for j in 0..theta.len() {
        let base = probe[j];
        probe[j] = base + eps;
        let up = f(&probe)?;
        probe[j] = base - eps;
        let down = f(&probe)?;
        probe[j] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::eval(format!("non-finite objective value at coordinate {j}")));
        }
        grad[j] = (up - down) / two_eps;
    }
    Ok(grad)
}

/// Hessian-vector product by central differences of an analytic gradient.
pub fn hessian_vector_product<T, G>(grad: &G, theta: &Vector<T>, v: &Vector<T>, eps: T) -> Result<Vector<T>>
where
    T: Scalar,
    G: Fn(&Vector<T>) -> Result<Vector<T>>,
{
    let up = grad(&axpy(eps, v, theta)?)?;
    let down = grad(&axpy(-eps, v, theta)?)?;
    let diff = up.sub(&down)?;
    Ok(diff.scaled(T::one() / (eps + eps)))
}

/// Largest-magnitude Hessian eigenvalue at `theta`, by power iteration on
/// finite-difference Hessian-vector products.
pub fn hessian_spectral_norm<T, G>(grad: G, theta: &Vector<T>, iterations: usize, eps: T) -> Result<T>
where
    T: Scalar,
    G: Fn(&Vector<T>) -> Result<Vector<T>>,
{
    let d = theta.len();
    // A fixed, non-degenerate start vector keeps the estimate deterministic.
    let mut v = Vector::from_vec((0..d).map(|j| T::one() + T::of(0.1 * j as f64)).collect());
    let n = v.norm();
    v = v.scaled(T::one() / n);
    let mut estimate = T::zero();
    for _ in 0..iterations {
        let hv = hessian_vector_product(&grad, theta, &v, eps)?;
        let norm = hv.norm();
        if norm == T::zero() {
            return Ok(T::zero());
        }
        estimate = norm;
        v = hv.scaled(T::one() / norm);
    }
    Ok(estimate)
}
