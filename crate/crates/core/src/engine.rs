//! The two-phase scalar protocol: pilot uplink, perturbed broadcast, loss
//! uplink, gradient assembly and model update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::WeightedAverage;
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::numerics::{axpy, standard_normal, tags, RngStream, Vector};
use crate::objectives::{Batch, Dataset, LocalObjective, Problem};
use crate::perturbation::rademacher_with;
use crate::scalar::Scalar;
use crate::schedules::ScheduleParams;
use crate::wireless::{draw_round_channels_with, uplink_scalar, ChannelDraw, ChannelMode, ChannelParams, ChannelProcess};

/// Settings of a 1P-ZOFL run.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoflSettings<T> {
    pub channel: ChannelParams<T>,
    pub channel_mode: ChannelMode,
    pub schedule: ScheduleParams<T>,
    pub batch_size: usize,
    /// Standard deviation of the optional multiplicative downlink distortion.
    pub downlink_sigma: Option<T>,
    /// Keep a full [`RoundRecord`] every this many rounds; 0 keeps none.
    pub record_every: u64,
}

/// Everything observed in one protocol round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord<T> {
    pub k: u64,
    pub theta_before: Vector<T>,
    pub phi: Vector<T>,
    pub pilot_sum: T,
    pub theta_perturbed: Vector<T>,
    pub loss_sum: T,
    pub g: Vector<T>,
    pub alpha_k: T,
    pub gamma_k: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentState<T> {
    pub theta: Vector<T>,
    /// Number of updates applied so far.
    pub round: u64,
    pub history: Vec<RoundRecord<T>>,
}

impl<T: Scalar> ExperimentState<T> {
    pub fn new(theta: Vector<T>) -> Self {
        ExperimentState { theta, round: 0, history: Vec::new() }
    }
}

/// Counts scalars sent from devices to the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UplinkLedger {
    pub per_round: u64,
    pub rounds: u64,
    pub total: u64,
}

impl UplinkLedger {
    pub fn new(per_round: u64) -> Self {
        UplinkLedger { per_round, rounds: 0, total: 0 }
    }

    /// Books one round, failing if its message count differs from the protocol's.
    pub fn book(&mut self, scalars: u64) -> Result<()> {
        if scalars != self.per_round {
            return Err(Error::eval(format!(
                "round sent {scalars} uplink scalars, protocol allows {}",
                self.per_round
            )));
        }
        self.rounds += 1;
        self.total += scalars;
        Ok(())
    }
}

/// Random inputs of one round besides the model.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundInputs<T> {
    pub draw: ChannelDraw<T>,
    pub phi: Vector<T>,
    pub batches: Vec<Batch>,
    /// Per-device multiplicative scaling of the received model.
    pub downlink: Option<Vec<T>>,
}

fn downlink_scales<T: Scalar, R: Rng + ?Sized>(sigma: Option<T>, n: usize, rng: &mut R) -> Option<Vec<T>> {
    sigma.map(|s| (0..n).map(|_| T::one() + s * standard_normal::<T, _>(rng)).collect())
}

impl<T: Scalar> RoundInputs<T> {
    /// Draws all inputs sequentially from one generator.
    pub fn from_rng<R: Rng + ?Sized>(
        problem: &Problem<T>,
        channel: &ChannelParams<T>,
        batch_size: usize,
        downlink_sigma: Option<T>,
        rng: &mut R,
    ) -> Self {
        let n = problem.n_devices();
        let draw = draw_round_channels_with(channel, n, None, rng);
        let phi = rademacher_with(problem.dim(), rng);
        let batches = problem.devices().iter().map(|d| Batch::sample(d.rows(), batch_size, rng)).collect();
        let downlink = downlink_scales(downlink_sigma, n, rng);
        RoundInputs { draw, phi, batches, downlink }
    }

    /// Draws inputs from per-purpose substreams of `round_stream`; batches
    /// use one substream per device.
    pub fn from_streams(
        problem: &Problem<T>,
        process: &mut ChannelProcess<T>,
        batch_size: usize,
        downlink_sigma: Option<T>,
        round_stream: &RngStream,
    ) -> Self {
        let draw = process.next_round(&mut round_stream.child(tags::CHANNEL).rng());
        let phi = rademacher_with(problem.dim(), &mut round_stream.child(tags::PERTURBATION).rng());
        let batch_stream = round_stream.child(tags::BATCH);
        let batches = problem
            .devices()
            .iter()
            .enumerate()
            .map(|(i, d)| Batch::sample(d.rows(), batch_size, &mut batch_stream.child(i as u64).rng()))
            .collect();
        let downlink = downlink_scales(
            downlink_sigma,
            problem.n_devices(),
            &mut round_stream.child(tags::DOWNLINK).rng(),
        );
        RoundInputs { draw, phi, batches, downlink }
    }
}

/// Received sum of the pilot slot: every device sends `1/sigma_h^2`.
pub fn pilot_phase<T: Scalar>(draw: &ChannelDraw<T>, sigma_h: T) -> T {
    let pilot = T::one() / (sigma_h * sigma_h);
    draw.h_first
        .iter()
        .zip(&draw.n_first)
        .map(|(&h, &n)| uplink_scalar(pilot, h, n))
        .sum()
}

/// Model the server broadcasts: `theta + gamma * pilot_sum * phi`.
pub fn broadcast_model<T: Scalar>(theta: &Vector<T>, gamma: T, phi: &Vector<T>, pilot_sum: T) -> Result<Vector<T>> {
    axpy(gamma * pilot_sum, phi, theta)
}

/// Result of the loss slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPhase<T> {
    pub loss_sum: T,
    pub max_abs_loss: T,
    pub scalars_sent: u64,
}

/// Received sum of the loss slot: `sum_i h_i f_i(theta', S_i)/sigma_h^2 + n_i`.
pub fn loss_phase<T: Scalar>(
    theta_perturbed: &Vector<T>,
    devices: &[LocalObjective<T>],
    batches: &[Batch],
    draw: &ChannelDraw<T>,
    sigma_h: T,
    downlink: Option<&[T]>,
) -> Result<LossPhase<T>> {
    if batches.len() != devices.len() || draw.devices() != devices.len() {
        return Err(Error::Dimension { expected: devices.len(), found: batches.len().min(draw.devices()) });
    }
    let norm = T::one() / (sigma_h * sigma_h);
    let mut out = LossPhase { loss_sum: T::zero(), max_abs_loss: T::zero(), scalars_sent: 0 };
    for (i, dev) in devices.iter().enumerate() {
        let loss = match downlink {
            Some(scales) => dev.loss(&batches[i], &theta_perturbed.scaled(scales[i]))?,
            None => dev.loss(&batches[i], theta_perturbed)?,
        };
        out.max_abs_loss = out.max_abs_loss.max(loss.abs());
        out.loss_sum += uplink_scalar(loss * norm, draw.h_second[i], draw.n_second[i]);
        out.scalars_sent += 1;
    }
    Ok(out)
}

/// `g = loss_sum * phi`.
pub fn assemble_gradient<T: Scalar>(phi: &Vector<T>, loss_sum: T) -> Vector<T> {
    phi.scaled(loss_sum)
}

/// `theta - alpha * g`.
pub fn update<T: Scalar>(theta: &Vector<T>, alpha: T, g: &Vector<T>) -> Result<Vector<T>> {
    axpy(-alpha, g, theta)
}

/// One realisation of the gradient estimate at a fixed model.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateSample<T> {
    pub phi: Vector<T>,
    pub pilot_sum: T,
    pub theta_perturbed: Vector<T>,
    pub loss_sum: T,
    pub g: Vector<T>,
    pub max_abs_loss: T,
    pub uplink_scalars: u64,
}

/// Runs the pilot, broadcast, loss and assembly steps at `theta`.
pub fn sample_estimate<T: Scalar>(
    problem: &Problem<T>,
    channel: &ChannelParams<T>,
    theta: &Vector<T>,
    gamma: T,
    inputs: RoundInputs<T>,
) -> Result<EstimateSample<T>> {
    theta.check_len(problem.dim())?;
    let RoundInputs { draw, phi, batches, downlink } = inputs;
    let pilot_sum = pilot_phase(&draw, channel.sigma_h);
    let theta_perturbed = broadcast_model(theta, gamma, &phi, pilot_sum)?;
    let loss = loss_phase(&theta_perturbed, problem.devices(), &batches, &draw, channel.sigma_h, downlink.as_deref())?;
    let g = assemble_gradient(&phi, loss.loss_sum);
    Ok(EstimateSample {
        phi,
        pilot_sum,
        theta_perturbed,
        loss_sum: loss.loss_sum,
        g,
        max_abs_loss: loss.max_abs_loss,
        uplink_scalars: draw.devices() as u64 + loss.scalars_sent,
    })
}

/// Sequential 1P-ZOFL state machine for one seed.
pub struct ZoflEngine<'p, T> {
    problem: &'p Problem<T>,
    settings: ZoflSettings<T>,
    stream: RngStream,
    process: ChannelProcess<T>,
    ledger: UplinkLedger,
}

impl<'p, T: Scalar> ZoflEngine<'p, T> {
    /// `stream` is the root of this run's training randomness.
    pub fn new(problem: &'p Problem<T>, settings: ZoflSettings<T>, stream: RngStream) -> Result<Self> {
        if settings.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let process = ChannelProcess::new(settings.channel, settings.channel_mode, problem.n_devices())?;
        let ledger = UplinkLedger::new(2 * problem.n_devices() as u64);
        Ok(ZoflEngine { problem, settings, stream, process, ledger })
    }

    pub fn ledger(&self) -> &UplinkLedger {
        &self.ledger
    }

    pub fn settings(&self) -> &ZoflSettings<T> {
        &self.settings
    }

    /// Applies one round to `state` and returns its record.
    pub fn run_round(&mut self, state: &mut ExperimentState<T>) -> Result<RoundRecord<T>> {
        let k = state.round;
        let alpha_k = self.settings.schedule.alpha(k);
        let gamma_k = self.settings.schedule.gamma(k);
        let inputs = RoundInputs::from_streams(
            self.problem,
            &mut self.process,
            self.settings.batch_size,
            self.settings.downlink_sigma,
            &self.stream.child(k),
        );
        let sample = sample_estimate(self.problem, &self.settings.channel, &state.theta, gamma_k, inputs)?;
        self.ledger.book(sample.uplink_scalars)?;
        let next = update(&state.theta, alpha_k, &sample.g)?;
        if !next.all_finite() {
            return Err(Error::eval(format!("model diverged to a non-finite value at round {k}")));
        }
        let record = RoundRecord {
            k,
            theta_before: std::mem::replace(&mut state.theta, next),
            phi: sample.phi,
            pilot_sum: sample.pilot_sum,
            theta_perturbed: sample.theta_perturbed,
            loss_sum: sample.loss_sum,
            g: sample.g,
            alpha_k,
            gamma_k,
        };
        state.round += 1;
        let every = self.settings.record_every;
        if every > 0 && k.is_multiple_of(every) {
            state.history.push(record.clone());
        }
        Ok(record)
    }
}

/// Evaluation cadence shared by the protocol and the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub seed: u64,
    pub rounds: u64,
    pub eval_every: u64,
    /// Also accumulate the step-weighted gradient metric, which needs the
    /// exact gradient at every round.
    pub track_weighted_metric: bool,
}

impl RunPlan {
    pub fn expected_rows(&self) -> usize {
        1 + (self.rounds / self.eval_every) as usize
    }
}

/// Rows, final state and communication ledger of one run.
#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub rows: Vec<MetricsRow>,
    pub state: ExperimentState<T>,
    pub ledger: UplinkLedger,
}

pub(crate) fn metrics_row<T: Scalar>(
    plan: &RunPlan,
    round: u64,
    theta: &Vector<T>,
    grad_norm_sq: f64,
    weighted: Option<f64>,
    test: Option<&Dataset<T>>,
    uplink: u64,
) -> Result<MetricsRow> {
    Ok(MetricsRow {
        seed: plan.seed,
        round,
        test_accuracy: test.map(|t| t.accuracy(theta)).transpose()?,
        grad_norm_sq: Some(grad_norm_sq),
        weighted_metric: weighted,
        uplink_scalars_cumulative: uplink,
    })
}

/// Runs `plan.rounds` protocol rounds, logging every `plan.eval_every` rounds.
pub fn run_experiment<T: Scalar>(
    problem: &Problem<T>,
    settings: ZoflSettings<T>,
    theta0: Vector<T>,
    plan: &RunPlan,
    test: Option<&Dataset<T>>,
    stream: &RngStream,
) -> Result<RunOutput<T>> {
    if plan.eval_every == 0 {
        return Err(Error::config("eval_every must be at least 1"));
    }
    theta0.check_len(problem.dim())?;
    let schedule = settings.schedule;
    let mut engine = ZoflEngine::new(problem, settings, stream.clone())?;
    let mut state = ExperimentState::new(theta0);
    let mut weighted = WeightedAverage::new();
    let mut rows = Vec::with_capacity(plan.expected_rows());
    for k in 0..=plan.rounds {
        let needs_row = k % plan.eval_every == 0;
        if needs_row || plan.track_weighted_metric {
            let grad_sq = problem.exact_global_gradient(&state.theta)?.norm_sq().as_f64();
            if plan.track_weighted_metric {
                let w = schedule.alpha(k).as_f64() * schedule.gamma(k).as_f64();
                weighted.push(w, grad_sq);
            }
            if needs_row {
                let wm = plan.track_weighted_metric.then(|| weighted.value());
                rows.push(metrics_row(plan, k, &state.theta, grad_sq, wm, test, engine.ledger().total)?);
            }
        }
        if k < plan.rounds {
            engine.run_round(&mut state)?;
        }
    }
    let ledger = *engine.ledger();
    Ok(RunOutput { rows, state, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_quadratic_devices, quadratic_spec, DeviceDataset, ObjectiveKind, ObjectiveSpec};

    fn draw(h1: &[f64], n1: &[f64], h2: &[f64], n2: &[f64]) -> ChannelDraw<f64> {
        ChannelDraw { h_first: h1.to_vec(), n_first: n1.to_vec(), h_second: h2.to_vec(), n_second: n2.to_vec() }
    }

    /// Device whose loss equals `value` for every batch and model.
    fn constant_device(id: usize, value: f64) -> LocalObjective<f64> {
        LocalObjective::Quadratic {
            device_id: id,
            target: Vector::zeros(1),
            offsets: vec![value, value],
            jitter: 1.0,
        }
    }

    #[test]
    fn pilot_phase_examples() {
        assert_eq!(pilot_phase(&draw(&[2.25], &[0.0], &[0.0], &[0.0]), 1.5), 1.0);
        assert_eq!(pilot_phase(&draw(&[0.0, 0.0], &[0.0, 0.0], &[0.0; 2], &[0.0; 2]), 1.0), 0.0);
        let s = pilot_phase(&draw(&[0.5, -0.2], &[0.1, 0.0], &[0.0; 2], &[0.0; 2]), 1.0);
        assert!((s - 0.4).abs() < 1e-15);
    }

    #[test]
    fn broadcast_examples() {
        let theta = Vector::from_f64(&[0.3, -1.0]);
        let phi = Vector::from_f64(&[1.0, -1.0]);
        assert_eq!(broadcast_model(&theta, 0.7, &phi, 0.0).unwrap(), theta);
        let two_phi = broadcast_model(&Vector::zeros(2), 1.0, &phi, 2.0).unwrap();
        assert_eq!(two_phi.as_slice(), &[2.0, -2.0]);
        let d = 4;
        let a = 1.0 / (d as f64).sqrt();
        let shifted = broadcast_model(&Vector::filled(d, 1.0), 0.5, &Vector::filled(d, a), 1.0).unwrap();
        assert!(shifted.iter().all(|&v| (v - (1.0 + 0.5 * a)).abs() < 1e-15));
    }

    #[test]
    fn loss_phase_examples() {
        let theta = Vector::zeros(1);
        let one = [Batch { indices: vec![0] }];
        let devs = [constant_device(0, 0.9)];
        let zero = loss_phase(&theta, &devs, &one, &draw(&[0.0], &[0.0], &[0.0], &[0.0]), 1.0, None).unwrap();
        assert_eq!(zero.loss_sum, 0.0);
        let exact = loss_phase(&theta, &devs, &one, &draw(&[0.0], &[0.0], &[4.0], &[0.0]), 2.0, None).unwrap();
        assert!((exact.loss_sum - 0.9).abs() < 1e-15);

        let devs = [constant_device(0, 0.7), constant_device(1, 0.3)];
        let two = [Batch { indices: vec![0] }, Batch { indices: vec![1] }];
        let r = loss_phase(&theta, &devs, &two, &draw(&[0.0; 2], &[0.0; 2], &[1.0, -1.0], &[0.0, 0.05]), 1.0, None)
            .unwrap();
        assert!((r.loss_sum - 0.45).abs() < 1e-15);
        assert_eq!(r.scalars_sent, 2);
    }

    #[test]
    fn gradient_and_update_examples() {
        let phi: Vector<f64> = Vector::from_f64(&[0.5, -0.5, 0.5, 0.5]);
        assert!(assemble_gradient(&phi, 0.0).iter().all(|&v| v == 0.0));
        let g = assemble_gradient(&phi, -3.0);
        assert!((g.norm() - 3.0 * phi.norm()).abs() < 1e-15);

        let theta = Vector::from_f64(&[1.0, 1.0]);
        assert_eq!(update(&theta, 0.3, &Vector::zeros(2)).unwrap(), theta);
        assert_eq!(update(&theta, 1.0, &Vector::from_f64(&[1.0, 0.0])).unwrap().as_slice(), &[0.0, 1.0]);
    }

    fn quadratic_problem(n: usize, d: usize, seed: u64) -> Problem<f64> {
        let devices = make_quadratic_devices(n, d, 0.5, 20, 0.1, &RngStream::new(seed)).unwrap();
        let spec = quadratic_spec(&devices, 3.0);
        Problem::new(spec, devices).unwrap()
    }

    fn settings() -> ZoflSettings<f64> {
        ZoflSettings {
            channel: ChannelParams::new(1.0, 0.5, 0.5).unwrap(),
            channel_mode: ChannelMode::PerRound,
            schedule: ScheduleParams { alpha0: 0.1, upsilon1: 0.51, gamma0: 1.0, upsilon2: 0.18 },
            batch_size: 10,
            downlink_sigma: None,
            record_every: 1,
        }
    }

    #[test]
    fn round_records_satisfy_protocol_structure() {
        let problem = quadratic_problem(4, 3, 1);
        let mut engine = ZoflEngine::new(&problem, settings(), RngStream::new(5)).unwrap();
        let mut state = ExperimentState::new(Vector::from_f64(&[0.4, -0.2, 1.0]));
        for _ in 0..50 {
            let r = engine.run_round(&mut state).unwrap();
            assert_eq!(r.g, r.phi.scaled(r.loss_sum));
            let expected = axpy(r.gamma_k * r.pilot_sum, &r.phi, &r.theta_before).unwrap();
            assert_eq!(r.theta_perturbed, expected);
            // g is collinear with phi: every ratio g_j / phi_j is the same scalar.
            assert!(r.g.iter().zip(r.phi.iter()).all(|(g, p)| (g / p - r.loss_sum).abs() <= 1e-12 * r.loss_sum.abs().max(1.0)));
        }
        assert_eq!(state.round, 50);
        assert_eq!(state.history.len(), 50);
        assert_eq!(engine.ledger().total, 50 * 8);
    }

    #[test]
    fn deterministic_single_device_round() {
        // With K_hh = sigma_h^2, no noise and one device, the round is a fixed
        // function of (theta, phi, h): recompute it by hand.
        let devices = vec![LocalObjective::Quadratic {
            device_id: 0,
            target: Vector::from_f64(&[1.0, -1.0]),
            offsets: vec![0.0; 3],
            jitter: 0.0,
        }];
        let spec = ObjectiveSpec {
            kind: ObjectiveKind::Quadratic,
            lambda: 0.0,
            bound_c: 10.0,
            smoothness_l: 1.0,
            hessian_bound: 1.0,
            lipschitz_l_s: 5.0,
        };
        let problem = Problem::new(spec, devices).unwrap();
        let mut s = settings();
        s.channel = ChannelParams::new(1.0, 1.0, 0.0).unwrap();
        let mut engine = ZoflEngine::new(&problem, s.clone(), RngStream::new(11)).unwrap();
        let theta = Vector::from_f64(&[0.0, 0.5]);
        let mut state = ExperimentState::new(theta.clone());
        let r = engine.run_round(&mut state).unwrap();
        let h = r.pilot_sum; // pilot 1/sigma_h^2 = 1 times h, no noise
        let perturbed = axpy(s.schedule.gamma(0) * h, &r.phi, &theta).unwrap();
        let loss = 0.5 * perturbed.sub(&Vector::from_f64(&[1.0, -1.0])).unwrap().norm_sq();
        let g = r.phi.scaled(h * loss);
        assert!(r.g.sub(&g).unwrap().norm() < 1e-12);
        let next = axpy(-s.schedule.alpha(0), &g, &theta).unwrap();
        assert!(state.theta.sub(&next).unwrap().norm() < 1e-12);
    }

    #[test]
    fn runs_are_reproducible() {
        let problem = quadratic_problem(3, 4, 2);
        let theta0 = Vector::from_f64(&[1.0, 0.0, -1.0, 0.5]);
        let run = |seed| {
            let mut engine = ZoflEngine::new(&problem, settings(), RngStream::new(seed)).unwrap();
            let mut state = ExperimentState::new(theta0.clone());
            engine.run_round(&mut state).unwrap();
            engine.run_round(&mut state).unwrap();
            state
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9).theta, run(10).theta);
    }

    #[test]
    fn experiment_row_contract() {
        let problem = quadratic_problem(3, 2, 3);
        let plan = RunPlan { seed: 4, rounds: 0, eval_every: 10, track_weighted_metric: true };
        let out = run_experiment(&problem, settings(), Vector::zeros(2), &plan, None, &RngStream::new(4)).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].round, 0);

        for (rounds, every) in [(100, 10), (95, 10), (7, 3), (50, 1)] {
            let plan = RunPlan { seed: 4, rounds, eval_every: every, track_weighted_metric: true };
            let out = run_experiment(&problem, settings(), Vector::zeros(2), &plan, None, &RngStream::new(4)).unwrap();
            assert_eq!(out.rows.len(), 1 + (rounds / every) as usize);
            for pair in out.rows.windows(2) {
                let dr = pair[1].round - pair[0].round;
                assert_eq!(pair[1].uplink_scalars_cumulative - pair[0].uplink_scalars_cumulative, dr * 6);
            }
        }
    }

    #[test]
    fn weighted_metric_in_rows_matches_first_row_gradient() {
        let problem = quadratic_problem(2, 3, 6);
        let plan = RunPlan { seed: 1, rounds: 20, eval_every: 5, track_weighted_metric: true };
        let out = run_experiment(&problem, settings(), Vector::filled(3, 1.0), &plan, None, &RngStream::new(1)).unwrap();
        assert_eq!(out.rows[0].weighted_metric, out.rows[0].grad_norm_sq);
    }

    #[test]
    fn downlink_distortion_changes_queries_only_when_enabled() {
        let problem = quadratic_problem(3, 3, 7);
        let theta0 = Vector::from_f64(&[0.2, 0.1, -0.3]);
        let plan = RunPlan { seed: 2, rounds: 30, eval_every: 30, track_weighted_metric: false };
        let clean = run_experiment(&problem, settings(), theta0.clone(), &plan, None, &RngStream::new(2)).unwrap();
        let mut s = settings();
        s.downlink_sigma = Some(0.0);
        let zero = run_experiment(&problem, s.clone(), theta0.clone(), &plan, None, &RngStream::new(2)).unwrap();
        assert_eq!(clean.state.theta, zero.state.theta);
        s.downlink_sigma = Some(0.3);
        let noisy = run_experiment(&problem, s, theta0, &plan, None, &RngStream::new(2)).unwrap();
        assert_ne!(clean.state.theta, noisy.state.theta);
    }

    #[test]
    fn ledger_rejects_wrong_counts() {
        let mut l = UplinkLedger::new(4);
        l.book(4).unwrap();
        assert!(l.book(5).is_err());
        assert_eq!((l.rounds, l.total), (1, 4));
    }

    #[test]
    fn logistic_run_stays_finite_and_scalar_generic() {
        use crate::objectives::{logistic_devices, logistic_spec, make_synthetic_dataset, partition, PartitionMode};
        let data = make_synthetic_dataset::<f32>(200, 4, 4.0, &RngStream::new(1)).unwrap();
        let parts: Vec<DeviceDataset<f32>> = partition(&data, 4, PartitionMode::Iid, &RngStream::new(2)).unwrap();
        let devices = logistic_devices(parts, 0.001);
        let spec = logistic_spec(&devices, 0.001, 5.0);
        let problem = Problem::new(spec, devices).unwrap();
        let s = ZoflSettings {
            channel: ChannelParams::<f64>::default().cast::<f32>(),
            channel_mode: ChannelMode::PerRound,
            schedule: ScheduleParams::default().cast::<f32>(),
            batch_size: 10,
            downlink_sigma: None,
            record_every: 0,
        };
        let plan = RunPlan { seed: 1, rounds: 200, eval_every: 50, track_weighted_metric: true };
        let out = run_experiment(&problem, s, Vector::zeros(4), &plan, Some(&data), &RngStream::new(3)).unwrap();
        assert_eq!(out.rows.len(), 5);
        assert!(out.state.theta.all_finite());
        assert!(out.state.history.is_empty());
    }
}
