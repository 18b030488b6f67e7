//! FedAvg reference: exact local gradients, one local step, ideal channel.

use serde::{Deserialize, Serialize};

use crate::engine::{metrics_row, ExperimentState, RunOutput, RunPlan, UplinkLedger};
use crate::error::{Error, Result};
use crate::numerics::{tags, RngStream, Vector};
use crate::objectives::{Batch, Dataset, Problem};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub eta: f64,
    pub batch_size: usize,
    /// Use each device's whole dataset instead of a sampled batch.
    #[serde(default)]
    pub full_batch: bool,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::config(format!("eta must be positive and finite, got {}", self.eta)));
        }
        if self.batch_size == 0 && !self.full_batch {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// `theta - eta * mean_i grad f_i(theta, S_i)`; `batches == None` uses full local data.
pub fn fedavg_round<T: Scalar>(
    theta: &Vector<T>,
    problem: &Problem<T>,
    batches: Option<&[Batch]>,
    eta: T,
) -> Result<Vector<T>> {
    let mut avg = Vector::zeros(problem.dim());
    for (i, dev) in problem.devices().iter().enumerate() {
        let grad = match batches {
            Some(b) => dev.gradient(&b[i], theta)?,
            None => dev.full_gradient(theta)?,
        };
        avg.add_scaled(T::one(), &grad)?;
    }
    let avg = avg.scaled(T::one() / T::of_usize(problem.n_devices()));
    let mut next = theta.clone();
    next.add_scaled(-eta, &avg)?;
    Ok(next)
}

/// Runs FedAvg with the same row schema as the 1P-ZOFL runner; the
/// weighted metric is left empty.
pub fn run_baseline<T: Scalar>(
    problem: &Problem<T>,
    config: &BaselineConfig,
    theta0: Vector<T>,
    plan: &RunPlan,
    test: Option<&Dataset<T>>,
    stream: &RngStream,
) -> Result<RunOutput<T>> {
    config.validate()?;
    if plan.eval_every == 0 {
        return Err(Error::config("eval_every must be at least 1"));
    }
    theta0.check_len(problem.dim())?;
    let per_round = (problem.n_devices() * problem.dim()) as u64;
    let mut ledger = UplinkLedger::new(per_round);
    let mut state = ExperimentState::new(theta0);
    let eta = T::of(config.eta);
    let mut rows = Vec::with_capacity(plan.expected_rows());
    for k in 0..=plan.rounds {
        if k % plan.eval_every == 0 {
            let grad_sq = problem.exact_global_gradient(&state.theta)?.norm_sq().as_f64();
            rows.push(metrics_row(plan, k, &state.theta, grad_sq, None, test, ledger.total)?);
        }
        if k == plan.rounds {
            break;
        }
        let next = if config.full_batch {
            fedavg_round(&state.theta, problem, None, eta)?
        } else {
            let round = stream.children(&[tags::BASELINE, k]);
            let batches: Vec<Batch> = problem
                .devices()
                .iter()
                .enumerate()
                .map(|(i, d)| Batch::sample(d.rows(), config.batch_size, &mut round.child(i as u64).rng()))
                .collect();
            fedavg_round(&state.theta, problem, Some(&batches), eta)?
        };
        if !next.all_finite() {
            return Err(Error::eval(format!("baseline diverged at round {k}")));
        }
        ledger.book(per_round)?;
        state.theta = next;
        state.round += 1;
    }
    Ok(RunOutput { rows, state, ledger })
}
