//! Monte-Carlo checks of the estimator's bias, second moment and martingale
//! tail, the closed-form constants they are compared against, and the
//! step-weighted gradient metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{sample_estimate, update, RoundInputs};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::objectives::{LocalObjective, Problem};
use crate::perturbation::perturbation_constants;
use crate::scalar::Scalar;
use crate::schedules::ScheduleParams;
use crate::wireless::ChannelParams;

/// Fewest samples [`estimate_bias`] accepts.
pub const MIN_BIAS_SAMPLES: usize = 10_000;

/// Replicas are split into this many independently seeded chunks and merged
/// in chunk order, so results do not depend on the thread count.
const CHUNKS: usize = 32;

/// Statistical slack used by every bound check, in standard errors.
pub const SLACK_SE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub sigma_h: f64,
    pub k_hh: f64,
    pub sigma_n: f64,
    pub n_devices: usize,
    pub bound_c: f64,
}

/// Bias scale `c1`, second-moment bound `c2` and bias-norm constant `c3` of
/// the estimator.
pub fn lemma_constants(
    params: &ChannelParams<f64>,
    beta1: f64,
    beta2: f64,
    beta3: f64,
    bound_c: f64,
    n_devices: usize,
) -> Result<LemmaConstants> {
    params.validate()?;
    if n_devices == 0 || !(beta1 > 0.0 && beta2 > 0.0 && beta3 > 0.0 && bound_c > 0.0) {
        return Err(Error::config("lemma constants need positive beta1, beta2, beta3, C and N"));
    }
    let ChannelParams { sigma_h, k_hh, sigma_n } = *params;
    let n = n_devices as f64;
    let s2 = sigma_h * sigma_h;
    let noise = sigma_n * sigma_n;
    // validate() already rejected k_hh > sigma_h^2; rounding may leave a tiny negative.
    let disc = (s2 * s2 - k_hh * k_hh).max(0.0);
    let c1 = beta1 * k_hh / (s2 * s2);
    let c2 = beta2 * beta2 * n * (n * bound_c * bound_c / s2 + noise);
    let bracket = (2.0 * k_hh + disc.sqrt()) + (n - 1.0) * s2 + n * noise;
    let c3 = 2.0 * n * n * beta3 * beta2.powi(3) * sigma_h.powi(3) / (beta1 * k_hh)
        * (2.0 / std::f64::consts::PI).sqrt()
        * bracket;
    Ok(LemmaConstants { c1, c2, c3, beta1, beta2, beta3, sigma_h, k_hh, sigma_n, n_devices, bound_c })
}

/// Problem, channel and batch size under which estimates are drawn.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorContext<'a, T> {
    pub problem: &'a Problem<T>,
    pub channel: ChannelParams<T>,
    pub batch_size: usize,
}

impl<'a, T: Scalar> EstimatorContext<'a, T> {
    /// Constants for the Rademacher perturbation and the problem's bounds.
    pub fn constants(&self) -> Result<LemmaConstants> {
        let pc = perturbation_constants(self.problem.dim())?;
        lemma_constants(
            &self.channel.cast(),
            pc.beta1,
            pc.beta2,
            self.problem.spec.hessian_bound,
            self.problem.spec.bound_c,
            self.problem.n_devices(),
        )
    }

    fn inputs(&self, rng: &mut impl rand::Rng) -> RoundInputs<T> {
        RoundInputs::from_rng(self.problem, &self.channel, self.batch_size, None, rng)
    }
}

/// Per-coordinate running mean and variance (Welford), mergeable.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Moments { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Combines two accumulators (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
        }
        self.n += other.n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn report(&self) -> MonteCarloReport {
        let n = self.n as f64;
        let stderr = self
            .m2
            .iter()
            .map(|&s| if self.n > 1 { (s / (n - 1.0) / n).sqrt() } else { f64::INFINITY })
            .collect();
        MonteCarloReport { mean: self.mean.clone(), stderr, n_samples: self.n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_samples: usize,
}

/// Accumulators that can be combined across chunks.
trait Merge {
    fn merge_from(&mut self, other: Self);
}

impl Merge for Moments {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other);
    }
}

/// Moments plus the largest absolute loss seen.
struct MomentsAndMax(Moments, f64);

impl Merge for MomentsAndMax {
    fn merge_from(&mut self, other: Self) {
        self.0.merge(&other.0);
        self.1 = self.1.max(other.1);
    }
}

/// Runs `samples` replicas of `draw` in fixed chunks seeded from `stream`.
fn monte_carlo<A, N, F>(samples: usize, stream: &RngStream, new: N, draw: F) -> Result<A>
where
    A: Merge + Send,
    N: Fn() -> A + Sync,
    F: Fn(&mut rand_chacha::ChaCha8Rng, &mut A) -> Result<()> + Sync,
{
    let chunks = CHUNKS.min(samples.max(1));
    let parts: Vec<Result<A>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = samples / chunks + usize::from(c < samples % chunks);
            let mut rng = stream.child(c as u64).rng();
            let mut acc = new();
            for _ in 0..count {
                draw(&mut rng, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = new();
    for part in parts {
        total.merge_from(part?);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub estimate: MonteCarloReport,
    pub gamma: f64,
    pub c1: f64,
    pub c3: f64,
    pub exact_gradient: Vec<f64>,
    /// `mean / (c1 gamma) - grad F`.
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    /// `|stderr| / (c1 gamma)`.
    pub aggregate_stderr: f64,
    /// `c3 gamma`.
    pub budget: f64,
    pub passed: bool,
    /// Per coordinate: `|mean - c1 gamma grad F| <= c3 c1 gamma^2 + 3 stderr`.
    pub coordinatewise_passed: bool,
}

/// Estimates `E[g | theta]` from `samples` independent rounds at a frozen model.
pub fn estimate_bias<T: Scalar>(
    ctx: &EstimatorContext<'_, T>,
    theta: &Vector<T>,
    gamma: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<BiasReport> {
    if samples < MIN_BIAS_SAMPLES {
        return Err(Error::config(format!("bias estimation needs at least {MIN_BIAS_SAMPLES} samples, got {samples}")));
    }
    let consts = ctx.constants()?;
    let d = ctx.problem.dim();
    let g_t = T::of(gamma);
    let moments = monte_carlo(samples, stream, || Moments::new(d), |rng, acc: &mut Moments| {
        let s = sample_estimate(ctx.problem, &ctx.channel, theta, g_t, ctx.inputs(rng))?;
        acc.push(&s.g.to_f64());
        Ok(())
    })?;
    let estimate = moments.report();
    let grad = ctx.problem.exact_global_gradient(theta)?.to_f64();
    let scale = consts.c1 * gamma;
    let residual: Vec<f64> = estimate.mean.iter().zip(&grad).map(|(m, g)| m / scale - g).collect();
    let residual_norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
    let aggregate_stderr = estimate.stderr.iter().map(|s| s * s).sum::<f64>().sqrt() / scale;
    let budget = consts.c3 * gamma;
    let coord_budget = consts.c3 * consts.c1 * gamma * gamma;
    let coordinatewise_passed = estimate
        .mean
        .iter()
        .zip(&grad)
        .zip(&estimate.stderr)
        .all(|((m, g), s)| (m - scale * g).abs() <= coord_budget + SLACK_SE * s);
    Ok(BiasReport {
        passed: residual_norm <= budget + SLACK_SE * aggregate_stderr,
        estimate,
        gamma,
        c1: consts.c1,
        c3: consts.c3,
        exact_gradient: grad,
        residual,
        residual_norm,
        aggregate_stderr,
        budget,
        coordinatewise_passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentReport {
    pub mean_sq_norm: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub c2: f64,
    pub bound_c: f64,
    pub max_abs_loss: f64,
    /// Whether every observed local loss respected `|f_i| <= C`.
    pub precondition_holds: bool,
    pub passed: bool,
}

/// Estimates `E[|g|^2 | theta]` and compares it with `c2`; a loss outside
/// `[-C, C]` fails the precondition instead of passing silently.
pub fn check_second_moment<T: Scalar>(
    ctx: &EstimatorContext<'_, T>,
    theta: &Vector<T>,
    gamma: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<SecondMomentReport> {
    if samples < 2 {
        return Err(Error::config("second-moment check needs at least 2 samples"));
    }
    let consts = ctx.constants()?;
    let g_t = T::of(gamma);
    let acc = monte_carlo(samples, stream, || MomentsAndMax(Moments::new(1), 0.0), |rng, acc: &mut MomentsAndMax| {
        let s = sample_estimate(ctx.problem, &ctx.channel, theta, g_t, ctx.inputs(rng))?;
        acc.0.push(&[s.g.norm_sq().as_f64()]);
        acc.1 = acc.1.max(s.max_abs_loss.as_f64());
        Ok(())
    })?;
    let max_abs_loss = acc.1;
    let r = acc.0.report();
    let precondition_holds = max_abs_loss <= consts.bound_c;
    Ok(SecondMomentReport {
        mean_sq_norm: r.mean[0],
        stderr: r.stderr[0],
        n_samples: r.n_samples,
        c2: consts.c2,
        bound_c: consts.bound_c,
        max_abs_loss,
        precondition_holds,
        passed: precondition_holds && r.mean[0] <= consts.c2 + SLACK_SE * r.stderr[0],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSettings {
    /// Number of terms `K' - K` in each tail sum.
    pub terms: u64,
    pub replays: usize,
    /// Fresh rounds averaged to estimate each conditional mean.
    pub inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingalePoint {
    pub k: u64,
    pub terms: u64,
    pub mean_sq_norm: f64,
    pub stderr: f64,
    pub alpha_sq_sum: f64,
    /// `c2 * sum alpha_k^2`.
    pub bound: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub c2: f64,
    pub points: Vec<MartingalePoint>,
    /// Point estimates strictly decrease with the checkpoint index.
    pub decreasing: bool,
    pub passed: bool,
}

/// Sample mean of `inner` fresh estimates at `theta`.
fn conditional_mean<T: Scalar>(
    ctx: &EstimatorContext<'_, T>,
    theta: &Vector<T>,
    gamma: T,
    inner: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vector<T>> {
    let mut sum = Vector::zeros(theta.len());
    for _ in 0..inner {
        let s = sample_estimate(ctx.problem, &ctx.channel, theta, gamma, ctx.inputs(rng))?;
        sum.add_scaled(T::one(), &s.g)?;
    }
    Ok(sum.scaled(T::one() / T::of_usize(inner)))
}

/// Estimates `E|sum_{k=K}^{K+terms-1} alpha_k e_k|^2` from each checkpoint
/// `(K, theta_K)` by replaying the protocol, where `e_k` is the round's
/// estimate minus a Monte-Carlo estimate of its conditional mean.
pub fn martingale_tail<T: Scalar>(
    ctx: &EstimatorContext<'_, T>,
    schedule: &ScheduleParams<f64>,
    checkpoints: &[(u64, Vector<T>)],
    settings: &MartingaleSettings,
    stream: &RngStream,
) -> Result<MartingaleReport> {
    if settings.replays < 2 || settings.inner == 0 {
        return Err(Error::config("martingale check needs at least 2 replays and 1 inner sample"));
    }
    let consts = ctx.constants()?;
    let sched = schedule.cast::<T>();
    let mut points = Vec::with_capacity(checkpoints.len());
    for (ci, (k0, theta0)) in checkpoints.iter().enumerate() {
        let cstream = stream.child(ci as u64);
        let replay = |rng: &mut rand_chacha::ChaCha8Rng, acc: &mut Moments| -> Result<()> {
            let mut theta = theta0.clone();
            let mut tail = Vector::<T>::zeros(theta.len());
            for k in *k0..*k0 + settings.terms {
                let (a, g) = (sched.alpha(k), sched.gamma(k));
                let mean = conditional_mean(ctx, &theta, g, settings.inner, rng)?;
                let s = sample_estimate(ctx.problem, &ctx.channel, &theta, g, ctx.inputs(rng))?;
                tail.add_scaled(a, &s.g.sub(&mean)?)?;
                theta = update(&theta, a, &s.g)?;
            }
            acc.push(&[tail.norm_sq().as_f64()]);
            Ok(())
        };
        let r = monte_carlo(settings.replays, &cstream, || Moments::new(1), replay)?.report();
        let alpha_sq_sum: f64 = (*k0..*k0 + settings.terms).map(|k| schedule.alpha(k).powi(2)).sum();
        let bound = consts.c2 * alpha_sq_sum;
        points.push(MartingalePoint {
            k: *k0,
            terms: settings.terms,
            mean_sq_norm: r.mean[0],
            stderr: if settings.terms == 0 { 0.0 } else { r.stderr[0] },
            alpha_sq_sum,
            bound,
            passed: r.mean[0] <= bound + SLACK_SE * if settings.terms == 0 { 0.0 } else { r.stderr[0] },
        });
    }
    let decreasing = points.windows(2).all(|w| w[1].mean_sq_norm < w[0].mean_sq_norm);
    let passed = decreasing && points.iter().all(|p| p.passed);
    Ok(MartingaleReport { c2: consts.c2, points, decreasing, passed })
}

/// Running `sum w_k x_k / sum w_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WeightedAverage {
    weighted: f64,
    weights: f64,
}

impl WeightedAverage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, weight: f64, value: f64) {
        self.weighted += weight * value;
        self.weights += weight;
    }

    pub fn value(&self) -> f64 {
        self.weighted / self.weights
    }
}

/// `W(K) = sum_{k<=K} alpha_k gamma_k |grad F(theta_k)|^2 / sum_{k<=K} alpha_k gamma_k`
/// for every `K` given the per-round squared gradient norms.
pub fn weighted_gradient_metric(grad_norm_sq: &[f64], schedule: &ScheduleParams<f64>) -> Vec<f64> {
    let mut avg = WeightedAverage::new();
    grad_norm_sq
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            avg.push(schedule.alpha(k as u64) * schedule.gamma(k as u64), v);
            avg.value()
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::config("slope needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// `F(theta) - F(theta*)` for quadratic problems, where `theta*` is the mean
/// target; `None` for other objectives.
pub fn optimality_gap<T: Scalar>(problem: &Problem<T>, theta: &Vector<T>) -> Result<Option<f64>> {
    let mut star = Vector::<T>::zeros(problem.dim());
    for dev in problem.devices() {
        match dev {
            LocalObjective::Quadratic { target, .. } => star.add_scaled(T::one(), target)?,
            LocalObjective::Logistic { .. } => return Ok(None),
        }
    }
    let star = star.scaled(T::one() / T::of_usize(problem.n_devices()));
    Ok(Some((problem.global_loss(theta)? - problem.global_loss(&star)?).as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_quadratic_devices, quadratic_spec, ObjectiveKind, ObjectiveSpec};

    fn c(sigma_h: f64, k_hh: f64, sigma_n: f64) -> ChannelParams<f64> {
        ChannelParams::new(sigma_h, k_hh, sigma_n).unwrap()
    }

    #[test]
    fn constant_examples() {
        let k = lemma_constants(&c(1.0, 0.5, 0.5), 0.1, 1.0, 1.0, 1.0, 2).unwrap();
        assert!((k.c1 - 0.05).abs() < 1e-15);
        assert!((k.c2 - 4.5).abs() < 1e-12);
        let k = lemma_constants(&c(1.0, 0.5, 0.5), 1.0, 1.0, 1.0, 1.0, 1).unwrap();
        // Value computed independently: 4 sqrt(2/pi) (1 + sqrt(0.75) + 0.25).
        assert!((k.c3 - 6.753_375_999_8).abs() < 1e-9);
        assert_eq!(k, lemma_constants(&c(1.0, 0.5, 0.5), 1.0, 1.0, 1.0, 1.0, 1).unwrap());
    }

    #[test]
    fn k_hh_above_variance_is_a_domain_error() {
        let bad = ChannelParams { sigma_h: 1.0, k_hh: 1.5, sigma_n: 0.1 };
        assert!(matches!(lemma_constants(&bad, 0.1, 1.0, 1.0, 1.0, 2), Err(Error::Domain(_))));
    }

    fn quadratic(n: usize, d: usize) -> Problem<f64> {
        let devices = make_quadratic_devices(n, d, 1.0, 50, 0.2, &RngStream::new(21)).unwrap();
        let spec = quadratic_spec(&devices, 3.0);
        Problem::new(spec, devices).unwrap()
    }

    fn mean_target(problem: &Problem<f64>) -> Vector<f64> {
        let mut t = Vector::zeros(problem.dim());
        for dev in problem.devices() {
            if let LocalObjective::Quadratic { target, .. } = dev {
                t.add_scaled(1.0, target).unwrap();
            }
        }
        t.scaled(1.0 / problem.n_devices() as f64)
    }

    #[test]
    fn vanishing_gamma_at_stationary_point_is_unbiased() {
        let problem = quadratic(3, 5);
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        let star = mean_target(&problem);
        let r = estimate_bias(&ctx, &star, 1e-6, 20_000, &RngStream::new(1)).unwrap();
        assert!(problem.exact_global_gradient(&star).unwrap().norm() < 1e-12);
        for (m, s) in r.estimate.mean.iter().zip(&r.estimate.stderr) {
            assert!(m.abs() <= 3.0 * s, "{m} vs {s}");
        }
    }

    #[test]
    fn mean_matches_exact_quadratic_oracle() {
        // For a quadratic objective and Rademacher directions the second-order
        // term is odd in phi, so E[g] = c1 gamma grad F with no bias at all.
        let problem = quadratic(3, 5);
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        let theta = Vector::from_f64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let r = estimate_bias(&ctx, &theta, 0.1, 50_000, &RngStream::new(2)).unwrap();
        let scale = r.c1 * 0.1;
        for ((m, g), s) in r.estimate.mean.iter().zip(&r.exact_gradient).zip(&r.estimate.stderr) {
            assert!((m - scale * g).abs() <= 4.0 * s, "{m} vs {}", scale * g);
        }
        assert!(r.passed && r.coordinatewise_passed);
    }

    #[test]
    fn too_few_bias_samples_rejected() {
        let problem = quadratic(2, 2);
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        assert!(estimate_bias(&ctx, &Vector::zeros(2), 0.1, 100, &RngStream::new(0)).is_err());
    }

    #[test]
    fn stderr_follows_inverse_square_root() {
        let problem = quadratic(3, 4);
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        let theta = Vector::filled(4, 0.5);
        let agg = |m| estimate_bias(&ctx, &theta, 0.1, m, &RngStream::new(m as u64)).unwrap().aggregate_stderr;
        let (a, b, q) = (agg(20_000), agg(40_000), agg(80_000));
        let halving = q / a;
        assert!((halving - 0.5).abs() <= 0.1, "{halving}");
        let doubling = b / a;
        assert!((doubling - std::f64::consts::FRAC_1_SQRT_2).abs() <= 0.2 * std::f64::consts::FRAC_1_SQRT_2, "{doubling}");
    }

    fn zero_loss_problem() -> Problem<f64> {
        let devices = vec![
            LocalObjective::Quadratic { device_id: 0, target: Vector::zeros(3), offsets: vec![0.0; 4], jitter: 0.0 };
            2
        ];
        let spec = ObjectiveSpec {
            kind: ObjectiveKind::Quadratic,
            lambda: 0.0,
            bound_c: 1.0,
            smoothness_l: 2.0,
            hessian_bound: 1.0,
            lipschitz_l_s: 1.0,
        };
        Problem::new(spec, devices).unwrap()
    }

    #[test]
    fn second_moment_with_zero_loss() {
        // The model sits at every target and gamma = 0, so every local loss is exactly zero.
        let problem = zero_loss_problem();
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.0), batch_size: 2 };
        let r = check_second_moment(&ctx, &Vector::zeros(3), 0.0, 1000, &RngStream::new(3)).unwrap();
        assert_eq!(r.mean_sq_norm, 0.0);
        assert!(r.passed);

        let noisy = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 2 };
        let r = check_second_moment(&noisy, &Vector::zeros(3), 0.0, 1000, &RngStream::new(3)).unwrap();
        assert!(r.mean_sq_norm > 0.0);
        // Noise only: E|g|^2 = N sigma_n^2 |phi|^2.
        assert!((r.mean_sq_norm - 0.5).abs() <= 3.0 * r.stderr);
    }

    #[test]
    fn second_moment_bound_on_small_problem() {
        // N = 2, C = 1, sigma_h = 1, sigma_n^2 = 0.25 gives c2 = 4.5.
        let devices = make_quadratic_devices(2, 3, 0.2, 20, 0.05, &RngStream::new(8)).unwrap();
        let spec = ObjectiveSpec { bound_c: 1.0, ..quadratic_spec(&devices, 0.5) };
        let problem = Problem::new(spec, devices).unwrap();
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        let r = check_second_moment(&ctx, &Vector::zeros(3), 0.1, 100_000, &RngStream::new(4)).unwrap();
        assert!((r.c2 - 4.5).abs() < 1e-12);
        assert!(r.precondition_holds, "max loss {}", r.max_abs_loss);
        assert!(r.passed && r.mean_sq_norm < r.c2);
    }

    #[test]
    fn violated_loss_bound_is_reported() {
        let devices = make_quadratic_devices(2, 3, 1.0, 20, 0.05, &RngStream::new(8)).unwrap();
        let spec = ObjectiveSpec { bound_c: 1e-3, ..quadratic_spec(&devices, 0.5) };
        let problem = Problem::new(spec, devices).unwrap();
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        let r = check_second_moment(&ctx, &Vector::filled(3, 2.0), 0.1, 1000, &RngStream::new(4)).unwrap();
        assert!(!r.precondition_holds && !r.passed);
    }

    fn tail_settings(terms: u64) -> MartingaleSettings {
        MartingaleSettings { terms, replays: 200, inner: 20 }
    }

    #[test]
    fn empty_tail_is_zero() {
        let problem = quadratic(2, 3);
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        let r = martingale_tail(&ctx, &ScheduleParams::default(), &[(0, Vector::zeros(3))], &tail_settings(0), &RngStream::new(1))
            .unwrap();
        assert_eq!(r.points[0].mean_sq_norm, 0.0);
        assert!(r.points[0].passed);
    }

    #[test]
    fn single_term_within_alpha_squared_c2() {
        let problem = quadratic(2, 3);
        let ctx = EstimatorContext { problem: &problem, channel: c(1.0, 0.5, 0.5), batch_size: 10 };
        let sched = ScheduleParams { alpha0: 0.1, upsilon1: 0.51, gamma0: 1.0, upsilon2: 0.18 };
        let r = martingale_tail(&ctx, &sched, &[(5, Vector::filled(3, 0.2))], &tail_settings(1), &RngStream::new(2)).unwrap();
        let p = &r.points[0];
        assert!((p.bound - sched.alpha(5).powi(2) * r.c2).abs() < 1e-15);
        assert!(p.passed && p.mean_sq_norm > 0.0);
    }

    #[test]
    fn weighted_metric_examples() {
        let s = ScheduleParams::default();
        assert!(weighted_gradient_metric(&[2.5; 50], &s).iter().all(|w| (w - 2.5).abs() < 1e-12));
        assert_eq!(weighted_gradient_metric(&[7.0], &s), vec![7.0]);
        // Independent oracle: explicit ratio of sums at K = 2.
        let w = weighted_gradient_metric(&[4.0, 1.0, 0.0], &s);
        let wk: Vec<f64> = (0..3).map(|k| s.alpha(k) * s.gamma(k)).collect();
        let expected = (4.0 * wk[0] + wk[1]) / wk.iter().sum::<f64>();
        assert!((w[2] - expected).abs() < 1e-15);
    }

    #[test]
    fn slope_of_power_law() {
        let xs: Vec<f64> = (1..20).map(|i| i as f64 * 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.4)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() + 0.4).abs() < 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let data: Vec<f64> = (0..101).map(|i| ((i * 37) % 17) as f64 * 0.3 - 1.0).collect();
        let mut one = Moments::new(1);
        data.iter().for_each(|&v| one.push(&[v]));
        let (mut a, mut b) = (Moments::new(1), Moments::new(1));
        data[..40].iter().for_each(|&v| a.push(&[v]));
        data[40..].iter().for_each(|&v| b.push(&[v]));
        a.merge(&b);
        assert_eq!(a.count(), 101);
        assert!((a.report().mean[0] - one.report().mean[0]).abs() < 1e-14);
        assert!((a.report().stderr[0] - one.report().stderr[0]).abs() < 1e-14);
    }

    #[test]
    fn optimality_gap_is_zero_at_mean_target() {
        let problem = quadratic(3, 2);
        let star = mean_target(&problem);
        assert!(optimality_gap(&problem, &star).unwrap().unwrap().abs() < 1e-12);
        assert!(optimality_gap(&problem, &Vector::filled(2, 5.0)).unwrap().unwrap() > 0.0);
    }
}
