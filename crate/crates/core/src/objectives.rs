//! Local losses, the global sum objective, datasets and their partitioning.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, standard_normal, RngStream, Vector};
use crate::scalar::Scalar;

/// Regularization weight of the nonconvex logistic model.
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// Maximum of `|d/dt t^2/(1+t^2)|`, attained at `t = 1/sqrt(3)`.
const REGULARIZER_SLOPE_MAX: f64 = 0.649_519_052_838_329;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Quadratic,
    LogisticNonconvex,
}

/// Objective family plus the analytic constants the estimator bounds need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub lambda: f64,
    /// Bound `C` on `|f_i|` over the region the run visits.
    pub bound_c: f64,
    /// Smoothness constant `L` of the global objective.
    pub smoothness_l: f64,
    /// Bound `beta3` on the spectral norm of each local Hessian.
    pub hessian_bound: f64,
    /// Lipschitz constant of each `f_i(., S)`.
    pub lipschitz_l_s: f64,
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        for (name, v) in [
            ("bound_c", self.bound_c),
            ("smoothness_l", self.smoothness_l),
            ("hessian_bound", self.hessian_bound),
            ("lipschitz_l_s", self.lipschitz_l_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// A labelled binary-classification dataset stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    dim: usize,
    features: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(dim: usize, features: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dataset dimension must be at least 1"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::Dimension { expected: dim * labels.len(), found: features.len() });
        }
        if let Some(pos) = labels.iter().position(|&l| l > 1) {
            return Err(Error::Schema { line: pos + 1, message: format!("label {} not in {{0,1}}", labels[pos]) });
        }
        Ok(Dataset { dim, features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Dataset { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn push(&mut self, row: &[T], label: u8) {
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Dataset::empty(self.dim);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    /// Fraction of rows whose sign of `x . theta` matches the label.
    pub fn accuracy(&self, theta: &Vector<T>) -> Result<f64> {
        theta.check_len(self.dim)?;
        if self.is_empty() {
            return Err(Error::eval("accuracy of an empty dataset"));
        }
        let correct = (0..self.len())
            .filter(|&i| {
                let predicted = u8::from(dot(self.row(i), theta.as_slice()) >= T::zero());
                predicted == self.labels[i]
            })
            .count();
        Ok(correct as f64 / self.len() as f64)
    }

    pub fn max_l1_norm(&self) -> T {
        (0..self.len())
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    pub fn max_l2_norm(&self) -> T {
        (0..self.len())
            .map(|i| dot(self.row(i), self.row(i)).sqrt())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            dim: self.dim,
            features: self.features.iter().map(|&v| U::of(v.as_f64())).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// The part of a dataset held by one device.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceDataset<T> {
    pub device_id: usize,
    pub data: Dataset<T>,
}

/// Row indices sampled from a device's data for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    /// Uniform sampling with replacement.
    pub fn sample<R: Rng + ?Sized>(n_rows: usize, size: usize, rng: &mut R) -> Self {
        Batch { indices: (0..size).map(|_| rng.random_range(0..n_rows)).collect() }
    }

    pub fn full(n_rows: usize) -> Self {
        Batch { indices: (0..n_rows).collect() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn signed_label<T: Scalar>(label: u8) -> T {
    if label == 1 {
        T::one()
    } else {
        -T::one()
    }
}

fn regularizer<T: Scalar>(lambda: T, theta: &Vector<T>) -> T {
    lambda * theta.iter().map(|&t| t * t / (T::one() + t * t)).sum::<T>()
}

fn regularizer_gradient_into<T: Scalar>(lambda: T, theta: &Vector<T>, out: &mut Vector<T>) {
    let two = T::of(2.0);
    for (g, &t) in out.as_mut_slice().iter_mut().zip(theta.iter()) {
        let q = T::one() + t * t;
        *g += lambda * two * t / (q * q);
    }
}

/// One device's local objective `f_i(theta, S)`.
#[derive(Clone, Debug, PartialEq)]
pub enum LocalObjective<T> {
    /// Mean logistic loss over the batch plus `lambda * sum_j t_j^2 / (1 + t_j^2)`.
    Logistic { data: DeviceDataset<T>, lambda: T },
    /// `0.5 |theta - target|^2` plus `jitter` times the batch mean of
    /// zero-mean per-row offsets.
    Quadratic { device_id: usize, target: Vector<T>, offsets: Vec<T>, jitter: T },
}

impl<T: Scalar> LocalObjective<T> {
    pub fn device_id(&self) -> usize {
        match self {
            LocalObjective::Logistic { data, .. } => data.device_id,
            LocalObjective::Quadratic { device_id, .. } => *device_id,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            LocalObjective::Logistic { data, .. } => data.data.len(),
            LocalObjective::Quadratic { offsets, .. } => offsets.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LocalObjective::Logistic { data, .. } => data.data.dim(),
            LocalObjective::Quadratic { target, .. } => target.len(),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::eval("empty batch"));
        }
        let rows = self.rows();
        if let Some(&bad) = batch.indices.iter().find(|&&i| i >= rows) {
            return Err(Error::eval(format!("batch index {bad} out of range for {rows} rows")));
        }
        Ok(())
    }

    /// Stochastic loss on `batch`.
    pub fn loss(&self, batch: &Batch, theta: &Vector<T>) -> Result<T> {
        self.check_batch(batch)?;
        theta.check_len(self.dim())?;
        Ok(self.loss_on(&batch.indices, theta))
    }

    fn loss_on(&self, indices: &[usize], theta: &Vector<T>) -> T {
        let m = T::of_usize(indices.len());
        match self {
            LocalObjective::Logistic { data, lambda } => {
                let data = &data.data;
                let total: T = indices
                    .iter()
                    .map(|&i| {
                        let margin = signed_label::<T>(data.label(i)) * dot(data.row(i), theta.as_slice());
                        softplus(-margin)
                    })
                    .sum();
                total / m + regularizer(*lambda, theta)
            }
            LocalObjective::Quadratic { target, offsets, jitter, .. } => {
                let dist: T = theta.iter().zip(target.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
                let offset: T = indices.iter().map(|&i| offsets[i]).sum::<T>() / m;
                T::of(0.5) * dist + *jitter * offset
            }
        }
    }

    /// Analytic gradient of the stochastic loss on `batch`.
    pub fn gradient(&self, batch: &Batch, theta: &Vector<T>) -> Result<Vector<T>> {
        self.check_batch(batch)?;
        theta.check_len(self.dim())?;
        Ok(self.gradient_on(&batch.indices, theta))
    }

    fn gradient_on(&self, indices: &[usize], theta: &Vector<T>) -> Vector<T> {
        let d = self.dim();
        match self {
            LocalObjective::Logistic { data, lambda } => {
                let data = &data.data;
                let mut g = Vector::zeros(d);
                let inv_m = T::one() / T::of_usize(indices.len());
                for &i in indices {
                    let y = signed_label::<T>(data.label(i));
                    let x = data.row(i);
                    let margin = y * dot(x, theta.as_slice());
                    let coef = -y * sigmoid(-margin) * inv_m;
                    for (gj, &xj) in g.as_mut_slice().iter_mut().zip(x) {
                        *gj += coef * xj;
                    }
                }
                regularizer_gradient_into(*lambda, theta, &mut g);
                g
            }
            LocalObjective::Quadratic { target, .. } => {
                Vector::from_vec(theta.iter().zip(target.iter()).map(|(&a, &b)| a - b).collect())
            }
        }
    }

    /// Expected loss `F_i`, taken as the mean over all local rows.
    pub fn full_loss(&self, theta: &Vector<T>) -> Result<T> {
        theta.check_len(self.dim())?;
        let all: Vec<usize> = (0..self.rows()).collect();
        if all.is_empty() {
            return Err(Error::eval("device holds no data"));
        }
        Ok(self.loss_on(&all, theta))
    }

    pub fn full_gradient(&self, theta: &Vector<T>) -> Result<Vector<T>> {
        theta.check_len(self.dim())?;
        let all: Vec<usize> = (0..self.rows()).collect();
        if all.is_empty() {
            return Err(Error::eval("device holds no data"));
        }
        Ok(self.gradient_on(&all, theta))
    }
}

/// Free-function form of [`LocalObjective::loss`].
pub fn local_loss<T: Scalar>(objective: &LocalObjective<T>, batch: &Batch, theta: &Vector<T>) -> Result<T> {
    objective.loss(batch, theta)
}

/// The federated problem: the global objective is the sum of all local ones.
#[derive(Clone, Debug)]
pub struct Problem<T> {
    pub spec: ObjectiveSpec,
    devices: Vec<LocalObjective<T>>,
    dim: usize,
}

impl<T: Scalar> Problem<T> {
    pub fn new(spec: ObjectiveSpec, devices: Vec<LocalObjective<T>>) -> Result<Self> {
        spec.validate()?;
        let first = devices.first().ok_or_else(|| Error::config("problem needs at least one device"))?;
        let dim = first.dim();
        for dev in &devices {
            if dev.dim() != dim {
                return Err(Error::Dimension { expected: dim, found: dev.dim() });
            }
            if dev.rows() == 0 {
                return Err(Error::config(format!("device {} holds no data", dev.device_id())));
            }
        }
        Ok(Problem { spec, devices, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn devices(&self) -> &[LocalObjective<T>] {
        &self.devices
    }

    pub fn global_loss(&self, theta: &Vector<T>) -> Result<T> {
        self.devices.iter().map(|d| d.full_loss(theta)).sum()
    }

    /// Exact gradient of the global sum objective.
    pub fn exact_global_gradient(&self, theta: &Vector<T>) -> Result<Vector<T>> {
        let mut total = Vector::zeros(self.dim);
        for dev in &self.devices {
            total.add_scaled(T::one(), &dev.full_gradient(theta)?)?;
        }
        Ok(total)
    }
}

/// Two unit-covariance Gaussian blobs centred at `±(separation/2) u`,
/// `u = (1, ..., 1)/sqrt(d)`, with labels alternating 0, 1, 0, ...
pub fn make_synthetic_dataset<T: Scalar>(
    n_samples: usize,
    d: usize,
    separation: f64,
    stream: &RngStream,
) -> Result<Dataset<T>> {
    if d == 0 || n_samples < 2 {
        return Err(Error::config("synthetic data needs d >= 1 and at least 2 samples"));
    }
    let mut rng = stream.rng();
    let shift = T::of(separation / 2.0 / (d as f64).sqrt());
    let mut features = Vec::with_capacity(n_samples * d);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = (i % 2) as u8;
        let sign = signed_label::<T>(label);
        for _ in 0..d {
            features.push(sign * shift + standard_normal::<T, _>(&mut rng));
        }
        labels.push(label);
    }
    Dataset::new(d, features, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Iid,
    Noniid,
}

fn split_sizes(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|p| base + usize::from(p < extra)).collect()
}

/// Splits `data` across `n_devices`: a random equal split (`Iid`) or a
/// sort-by-label then contiguous equal split (`Noniid`).
pub fn partition<T: Scalar>(
    data: &Dataset<T>,
    n_devices: usize,
    mode: PartitionMode,
    stream: &RngStream,
) -> Result<Vec<DeviceDataset<T>>> {
    if n_devices == 0 || n_devices > data.len() {
        return Err(Error::config(format!(
            "cannot split {} samples across {} devices",
            data.len(),
            n_devices
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    match mode {
        PartitionMode::Iid => order.shuffle(&mut stream.rng()),
        PartitionMode::Noniid => order.sort_by_key(|&i| data.label(i)),
    }
    let mut start = 0;
    Ok(split_sizes(data.len(), n_devices)
        .into_iter()
        .enumerate()
        .map(|(device_id, size)| {
            let part = data.select(&order[start..start + size]);
            start += size;
            DeviceDataset { device_id, data: part }
        })
        .collect())
}

/// Devices with quadratic objectives: targets `t_i ~ N(0, spread^2 I)` and
/// per-row offsets shifted to have zero mean exactly.
pub fn make_quadratic_devices<T: Scalar>(
    n_devices: usize,
    d: usize,
    target_spread: f64,
    rows_per_device: usize,
    jitter: f64,
    stream: &RngStream,
) -> Result<Vec<LocalObjective<T>>> {
    if n_devices == 0 || d == 0 || rows_per_device == 0 {
        return Err(Error::config("quadratic problem needs devices, dimension and rows"));
    }
    let spread = T::of(target_spread);
    (0..n_devices)
        .map(|i| {
            let mut rng = stream.child(i as u64).rng();
            let target = Vector::from_vec((0..d).map(|_| spread * standard_normal::<T, _>(&mut rng)).collect());
            let mut offsets: Vec<T> = (0..rows_per_device).map(|_| standard_normal::<T, _>(&mut rng)).collect();
            let mean = offsets.iter().copied().sum::<T>() / T::of_usize(rows_per_device);
            offsets.iter_mut().for_each(|o| *o -= mean);
            Ok(LocalObjective::Quadratic { device_id: i, target, offsets, jitter: T::of(jitter) })
        })
        .collect()
}

pub fn logistic_devices<T: Scalar>(parts: Vec<DeviceDataset<T>>, lambda: f64) -> Vec<LocalObjective<T>> {
    parts
        .into_iter()
        .map(|data| LocalObjective::Logistic { data, lambda: T::of(lambda) })
        .collect()
}

/// Analytic constants for the logistic model on `theta` with `|theta|_inf <= theta_box`.
///
/// The Hessian of the mean logistic loss is bounded by `0.25 * lambda_max(X^T X / n)`,
/// itself bounded here by the Gershgorin row-sum bound; the regularizer adds at most `2 lambda`.
pub fn logistic_spec<T: Scalar>(devices: &[LocalObjective<T>], lambda: f64, theta_box: f64) -> ObjectiveSpec {
    let mut hess: f64 = 0.0;
    let mut max_l1: f64 = 0.0;
    let mut max_l2: f64 = 0.0;
    let mut d = 1;
    for dev in devices {
        if let LocalObjective::Logistic { data, .. } = dev {
            let data = &data.data;
            d = data.dim();
            max_l1 = max_l1.max(data.max_l1_norm().as_f64());
            max_l2 = max_l2.max(data.max_l2_norm().as_f64());
            let mut gram = vec![0.0f64; d * d];
            for i in 0..data.len() {
                let x = data.row(i);
                for a in 0..d {
                    for b in 0..d {
                        gram[a * d + b] += x[a].as_f64() * x[b].as_f64();
                    }
                }
            }
            let n = data.len().max(1) as f64;
            let gersh = (0..d)
                .map(|a| (0..d).map(|b| gram[a * d + b].abs()).sum::<f64>() / n)
                .fold(0.0, f64::max);
            hess = hess.max(0.25 * gersh + 2.0 * lambda);
        }
    }
    let bound_c = softplus(theta_box * max_l1) + lambda * d as f64;
    ObjectiveSpec {
        kind: ObjectiveKind::LogisticNonconvex,
        lambda,
        bound_c,
        smoothness_l: devices.len() as f64 * hess,
        hessian_bound: hess,
        lipschitz_l_s: max_l2 + lambda * REGULARIZER_SLOPE_MAX * (d as f64).sqrt(),
    }
}

/// Analytic constants for quadratic devices on `|theta|_inf <= theta_box`.
pub fn quadratic_spec<T: Scalar>(devices: &[LocalObjective<T>], theta_box: f64) -> ObjectiveSpec {
    let mut reach: f64 = 0.0;
    let mut offset: f64 = 0.0;
    for dev in devices {
        if let LocalObjective::Quadratic { target, offsets, jitter, .. } = dev {
            let r = theta_box * (target.len() as f64).sqrt() + target.norm().as_f64();
            reach = reach.max(r);
            let m = offsets.iter().map(|o| o.abs().as_f64()).fold(0.0, f64::max);
            offset = offset.max(jitter.abs().as_f64() * m);
        }
    }
    ObjectiveSpec {
        kind: ObjectiveKind::Quadratic,
        lambda: 0.0,
        bound_c: 0.5 * reach * reach + offset,
        smoothness_l: devices.len() as f64,
        hessian_bound: 1.0,
        lipschitz_l_s: reach.max(f64::MIN_POSITIVE),
    }
}

fn parse_row(line: usize, fields: &csv::StringRecord) -> std::result::Result<Vec<f64>, String> {
    fields
        .iter()
        .map(|f| f.trim().parse::<f64>().map_err(|_| format!("cannot parse {:?} as a number", f)))
        .collect::<std::result::Result<Vec<f64>, String>>()
        .map_err(|e| format!("{e} (line {line})"))
}

/// Reads `d` feature columns followed by one `{0,1}` label column; the header is optional.
pub fn load_csv_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path.as_ref())?;
    let mut width: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let values = match parse_row(line, &record) {
            Ok(v) => v,
            Err(_) if idx == 0 => continue, // header
            Err(message) => return Err(Error::Parse { line, message }),
        };
        if values.len() < 2 {
            return Err(Error::Schema { line, message: "need at least one feature and a label".into() });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Schema { line, message: format!("expected {w} columns, found {}", values.len()) })
            }
            _ => {}
        }
        let raw_label = values[values.len() - 1];
        let label = if raw_label == 0.0 {
            0
        } else if raw_label == 1.0 {
            1
        } else {
            return Err(Error::Schema { line, message: format!("label {raw_label} not in {{0,1}}") });
        };
        features.extend(values[..values.len() - 1].iter().map(|&v| T::of(v)));
        labels.push(label);
    }
    let w = width.ok_or_else(|| Error::Schema { line: 0, message: "no data rows".into() })?;
    Dataset::new(w - 1, features, labels)
}

/// Writes a dataset with a header row `x0,...,x{d-1},label`.
pub fn write_csv_dataset<T: Scalar>(path: impl AsRef<Path>, data: &Dataset<T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    let header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).chain(["label".to_string()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.len() {
        for v in data.row(i) {
            // Display prints the shortest representation that parses back exactly.
            write!(out, "{},", v.as_f64())?;
        }
        writeln!(out, "{}", data.label(i))?;
    }
    out.flush()?;
    Ok(())
}
