//! Builds problems from a configuration, runs seeds in parallel, and writes
//! metrics, summaries, sweep tables, plot data and verification reports.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    check_second_moment, estimate_bias, martingale_tail, EstimatorContext, LemmaConstants, MartingaleSettings,
    SLACK_SE,
};
use crate::baseline::{run_baseline, BaselineConfig};
use crate::config::{Algorithm, DataConfig, ExperimentConfig, ObjectiveConfig, ScheduleConfig};
use crate::engine::{run_experiment, ExperimentState, RunPlan, UplinkLedger, ZoflEngine, ZoflSettings};
use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, summarize_curve, write_metrics_csv, write_rows, MetricsRow, RunSummary, SweepRow};
use crate::numerics::{draw_standard_normal, tags, RngStream, Vector};
use crate::objectives::{
    load_csv_dataset, logistic_devices, logistic_spec, make_quadratic_devices, make_synthetic_dataset, partition,
    quadratic_spec, Dataset, ObjectiveSpec, Problem,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ZOFL_OUT_DIR";

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

/// Uplink scalars per round: `2N` for 1P-ZOFL, `N d` for FedAvg.
pub fn uplink_per_round(algorithm: Algorithm, n_devices: usize, dim: usize) -> u64 {
    match algorithm {
        Algorithm::Zofl => 2 * n_devices as u64,
        Algorithm::Fedavg => (n_devices * dim) as u64,
    }
}

/// FedAvg-to-1P-ZOFL uplink ratio, `d / 2`.
pub fn communication_ratio(n_devices: usize, dim: usize) -> f64 {
    uplink_per_round(Algorithm::Fedavg, n_devices, dim) as f64
        / uplink_per_round(Algorithm::Zofl, n_devices, dim) as f64
}

/// Everything one seed needs: the federated problem, a test set if the
/// objective is a classifier, and the initial model.
#[derive(Clone, Debug)]
pub struct SeedSetup {
    pub seed: u64,
    pub problem: Problem<f64>,
    pub test: Option<Dataset<f64>>,
    pub theta0: Vector<f64>,
}

fn apply_spec_overrides(mut spec: ObjectiveSpec, o: &ObjectiveConfig) -> ObjectiveSpec {
    spec.bound_c = o.bound_c.unwrap_or(spec.bound_c);
    spec.smoothness_l = o.smoothness_l.unwrap_or(spec.smoothness_l);
    spec.hessian_bound = o.hessian_bound.unwrap_or(spec.hessian_bound);
    spec.lipschitz_l_s = o.lipschitz_l_s.unwrap_or(spec.lipschitz_l_s);
    spec
}

fn check_dim(data: &Dataset<f64>, dim: usize, what: &str) -> Result<()> {
    if data.dim() != dim {
        return Err(Error::config(format!("{what} has {} feature columns but dim is {dim}", data.dim())));
    }
    Ok(())
}

pub fn build_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let root = RngStream::new(seed);
    let n = cfg.n_devices;
    let o = &cfg.objective;
    let (devices, spec, test) = match &cfg.data {
        DataConfig::Synthetic { train_size, test_size, separation } => {
            let train = make_synthetic_dataset(*train_size, cfg.dim, *separation, &root.child(tags::DATA))?;
            let test = make_synthetic_dataset(*test_size, cfg.dim, *separation, &root.child(tags::TEST_SET))?;
            let devices = logistic_devices(partition(&train, n, cfg.partition, &root.child(tags::PARTITION))?, o.lambda);
            let spec = logistic_spec(&devices, o.lambda, o.theta_box);
            (devices, spec, Some(test))
        }
        DataConfig::Csv { train_path, test_path } => {
            let train = load_csv_dataset::<f64>(train_path)?;
            check_dim(&train, cfg.dim, "training data")?;
            let test = test_path.as_ref().map(load_csv_dataset::<f64>).transpose()?;
            if let Some(t) = &test {
                check_dim(t, cfg.dim, "test data")?;
            }
            let devices = logistic_devices(partition(&train, n, cfg.partition, &root.child(tags::PARTITION))?, o.lambda);
            let spec = logistic_spec(&devices, o.lambda, o.theta_box);
            (devices, spec, test)
        }
        DataConfig::Quadratic { target_spread, rows_per_device, jitter } => {
            let devices =
                make_quadratic_devices(n, cfg.dim, *target_spread, *rows_per_device, *jitter, &root.child(tags::DATA))?;
            let spec = quadratic_spec(&devices, o.theta_box);
            (devices, spec, None)
        }
    };
    let problem = Problem::new(apply_spec_overrides(spec, o), devices)?;
    let theta0 = Vector::from_vec(
        draw_standard_normal(&root.child(tags::INIT), cfg.dim).into_iter().map(|z| cfg.init_scale * z).collect(),
    );
    Ok(SeedSetup { seed, problem, test, theta0 })
}

pub fn zofl_settings(cfg: &ExperimentConfig) -> Result<ZoflSettings<f64>> {
    let schedule = cfg
        .schedule
        .power_law()
        .ok_or_else(|| Error::config("1P-ZOFL needs a power_law schedule"))?;
    Ok(ZoflSettings {
        channel: cfg.channel,
        channel_mode: cfg.channel_mode,
        schedule,
        batch_size: cfg.batch_size,
        downlink_sigma: cfg.downlink_sigma(),
        record_every: cfg.record_every,
    })
}

fn baseline_config(cfg: &ExperimentConfig) -> Result<BaselineConfig> {
    match cfg.schedule {
        ScheduleConfig::Fedavg { eta, full_batch } => Ok(BaselineConfig { eta, batch_size: cfg.batch_size, full_batch }),
        ScheduleConfig::PowerLaw { .. } => Err(Error::config("FedAvg needs a fedavg schedule")),
    }
}

/// Output of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub ledger: UplinkLedger,
    pub state: ExperimentState<f64>,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let setup = build_seed(cfg, seed)?;
    let plan = RunPlan {
        seed,
        rounds: cfg.rounds,
        eval_every: cfg.eval_every,
        track_weighted_metric: cfg.weighted_metric,
    };
    let root = RngStream::new(seed);
    let out = match cfg.algorithm {
        Algorithm::Zofl => run_experiment(
            &setup.problem,
            zofl_settings(cfg)?,
            setup.theta0,
            &plan,
            setup.test.as_ref(),
            &root.child(tags::TRAIN),
        )?,
        Algorithm::Fedavg => run_baseline(
            &setup.problem,
            &baseline_config(cfg)?,
            setup.theta0,
            &plan,
            setup.test.as_ref(),
            &root.child(tags::BASELINE),
        )?,
    };
    Ok(SeedRun { seed, rows: out.rows, ledger: out.ledger, state: out.state })
}

/// All seeds of one experiment, in configuration order.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub summary: RunSummary,
}

impl ExperimentResult {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.runs.iter().flat_map(|r| r.rows.iter().cloned()).collect()
    }
}

/// Runs every seed (in parallel) and summarises across seeds.
pub fn run_config(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let curve = summarize_curve(&rows);
    let last = curve.last();
    let summary = RunSummary {
        algorithm: match cfg.algorithm {
            Algorithm::Zofl => "zofl".into(),
            Algorithm::Fedavg => "fedavg".into(),
        },
        seeds: cfg.seeds.clone(),
        rounds: cfg.rounds,
        uplink_scalars_per_round: uplink_per_round(cfg.algorithm, cfg.n_devices, cfg.dim),
        fedavg_to_zofl_uplink_ratio: communication_ratio(cfg.n_devices, cfg.dim),
        final_mean_accuracy: last.and_then(|p| p.mean_accuracy),
        final_std_accuracy: last.and_then(|p| p.std_accuracy),
        curve,
    };
    Ok(ExperimentResult { config: cfg.clone(), runs, summary })
}

/// Writes `<name>.csv` and `<name>.summary.json` into `dir`; returns the CSV path.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{}.csv", result.config.name));
    write_metrics_csv(&csv, &result.rows())?;
    let summary = dir.join(format!("{}.summary.json", result.config.name));
    std::fs::write(summary, serde_json::to_string_pretty(&result.summary)?)?;
    Ok(csv)
}

/// One level of a noise sweep with its retuned schedule constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub sigma_n_sq: f64,
    pub alpha0: f64,
    pub gamma0: f64,
}

/// Configuration of one sweep level: `sigma_n = sqrt(sigma_n_sq)` and the
/// level's `(alpha0, gamma0)`, exponents unchanged.
pub fn level_config(base: &ExperimentConfig, level: &NoiseLevel) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match &mut cfg.schedule {
        ScheduleConfig::PowerLaw { alpha0, gamma0, .. } => {
            *alpha0 = level.alpha0;
            *gamma0 = level.gamma0;
        }
        ScheduleConfig::Fedavg { .. } => return Err(Error::config("noise sweeps apply to 1P-ZOFL only")),
    }
    if !(level.sigma_n_sq >= 0.0) {
        return Err(Error::config(format!("noise variance must be non-negative, got {}", level.sigma_n_sq)));
    }
    cfg.channel.sigma_n = level.sigma_n_sq.sqrt();
    cfg.name = format!("{}.sigma2_{}", base.name, level.sigma_n_sq);
    cfg.validate()?;
    Ok(cfg)
}

pub fn sweep_noise(base: &ExperimentConfig, levels: &[NoiseLevel]) -> Result<Vec<(NoiseLevel, ExperimentResult)>> {
    if levels.is_empty() {
        return Err(Error::config("noise sweep needs at least one level"));
    }
    levels.iter().map(|l| Ok((*l, run_config(&level_config(base, l)?)?))).collect()
}

pub fn sweep_rows(results: &[(NoiseLevel, ExperimentResult)]) -> Vec<SweepRow> {
    results
        .iter()
        .flat_map(|(l, r)| r.rows().into_iter().map(move |row| SweepRow::new(l.sigma_n_sq, &row)))
        .collect()
}

/// Writes per-level outputs plus `<name>.sweep.csv`; returns the combined path.
pub fn write_sweep(base: &ExperimentConfig, results: &[(NoiseLevel, ExperimentResult)], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    for (_, r) in results {
        write_outputs(r, dir)?;
    }
    let path = dir.join(format!("{}.sweep.csv", base.name));
    write_rows(&path, &sweep_rows(results))?;
    Ok(path)
}

/// Row of a plot-data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub round: u64,
    pub n_seeds: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_grad_norm_sq: Option<f64>,
    pub std_grad_norm_sq: Option<f64>,
    pub mean_weighted_metric: Option<f64>,
    pub std_weighted_metric: Option<f64>,
}

/// Converts each metrics CSV into `<stem>.plot.csv` in `dir` (mean and
/// sample standard deviation across seeds per logged round).
pub fn export_plot(inputs: &[PathBuf], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    inputs
        .iter()
        .map(|input| {
            let rows = read_metrics_csv(input)?;
            let plot: Vec<PlotRow> = summarize_curve(&rows)
                .into_iter()
                .map(|p| PlotRow {
                    round: p.round,
                    n_seeds: p.n_seeds,
                    mean_accuracy: p.mean_accuracy,
                    std_accuracy: p.std_accuracy,
                    mean_grad_norm_sq: p.mean_grad_norm_sq,
                    std_grad_norm_sq: p.std_grad_norm_sq,
                    mean_weighted_metric: p.mean_weighted_metric,
                    std_weighted_metric: p.std_weighted_metric,
                })
                .collect();
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
            let out = dir.join(format!("{stem}.plot.csv"));
            write_rows(&out, &plot)?;
            Ok(out)
        })
        .collect()
}

/// One assertion of a verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub check: String,
    pub passed: bool,
    pub measured: f64,
    pub budget: f64,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub constants: LemmaConstants,
    pub entries: Vec<ReportEntry>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Models at rounds `ks` along the first seed's training trajectory.
pub fn trajectory_checkpoints(cfg: &ExperimentConfig, setup: &SeedSetup, ks: &[u64]) -> Result<Vec<(u64, Vector<f64>)>> {
    let mut settings = zofl_settings(cfg)?;
    settings.record_every = 0;
    let stream = RngStream::new(setup.seed).child(tags::TRAIN);
    let mut engine = ZoflEngine::new(&setup.problem, settings, stream)?;
    let mut state = ExperimentState::new(setup.theta0.clone());
    let mut sorted = ks.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::with_capacity(ks.len());
    for k in sorted {
        while state.round < k {
            engine.run_round(&mut state)?;
        }
        out.push((k, state.theta.clone()));
    }
    Ok(out)
}

/// Runs the bias, second-moment and martingale checks configured in
/// `cfg.verification` on the first seed's problem.
pub fn verify_lemmas(cfg: &ExperimentConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let schedule = cfg
        .schedule
        .power_law()
        .ok_or_else(|| Error::config("verify-lemmas needs a power_law schedule"))?;
    let v = &cfg.verification;
    let setup = build_seed(cfg, cfg.seeds[0])?;
    let ctx = EstimatorContext { problem: &setup.problem, channel: cfg.channel, batch_size: cfg.batch_size };
    let constants = ctx.constants()?;
    let theta = v.theta.as_ref().map(|t| Vector::from_f64(t)).unwrap_or_else(|| setup.theta0.clone());
    let analysis = RngStream::new(cfg.seeds[0]).child(tags::ANALYSIS);
    let mut entries = vec![ReportEntry {
        check: "lemma_constants".into(),
        passed: [constants.c1, constants.c2, constants.c3].iter().all(|c| c.is_finite() && *c > 0.0),
        measured: constants.c1,
        budget: constants.c3,
        detail: serde_json::to_value(&constants)?,
    }];

    let bias = estimate_bias(&ctx, &theta, v.gamma, v.bias_samples, &analysis.child(1))?;
    entries.push(ReportEntry {
        check: "bias_norm".into(),
        passed: bias.passed,
        measured: bias.residual_norm,
        budget: bias.budget + SLACK_SE * bias.aggregate_stderr,
        detail: serde_json::json!({
            "gamma": bias.gamma, "samples": bias.estimate.n_samples, "c1": bias.c1, "c3": bias.c3,
            "aggregate_stderr": bias.aggregate_stderr, "residual": bias.residual,
            "mean": bias.estimate.mean, "stderr": bias.estimate.stderr, "exact_gradient": bias.exact_gradient,
        }),
    });
    entries.push(ReportEntry {
        check: "bias_coordinatewise".into(),
        passed: bias.coordinatewise_passed,
        measured: bias.residual.iter().fold(0.0f64, |a, r| a.max(r.abs())),
        budget: bias.c3 * bias.c1 * bias.gamma * bias.gamma,
        detail: serde_json::Value::Null,
    });

    let moment = check_second_moment(&ctx, &theta, v.gamma, v.moment_samples, &analysis.child(2))?;
    entries.push(ReportEntry {
        check: "loss_bound_precondition".into(),
        passed: moment.precondition_holds,
        measured: moment.max_abs_loss,
        budget: moment.bound_c,
        detail: serde_json::Value::Null,
    });
    entries.push(ReportEntry {
        check: "second_moment".into(),
        passed: moment.passed,
        measured: moment.mean_sq_norm,
        budget: moment.c2 + SLACK_SE * moment.stderr,
        detail: serde_json::json!({ "stderr": moment.stderr, "samples": moment.n_samples, "c2": moment.c2 }),
    });

    let checkpoints = trajectory_checkpoints(cfg, &setup, &v.martingale_checkpoints)?;
    let settings = MartingaleSettings { terms: v.martingale_terms, replays: v.martingale_replays, inner: v.martingale_inner };
    let tail = martingale_tail(&ctx, &schedule, &checkpoints, &settings, &analysis.child(3))?;
    for p in &tail.points {
        entries.push(ReportEntry {
            check: format!("martingale_tail_k{}", p.k),
            passed: p.passed,
            measured: p.mean_sq_norm,
            budget: p.bound + SLACK_SE * p.stderr,
            detail: serde_json::json!({ "terms": p.terms, "stderr": p.stderr, "alpha_sq_sum": p.alpha_sq_sum }),
        });
    }
    entries.push(ReportEntry {
        check: "martingale_tail_decreasing".into(),
        passed: tail.decreasing,
        measured: tail.points.last().map_or(0.0, |p| p.mean_sq_norm),
        budget: tail.points.first().map_or(0.0, |p| p.mean_sq_norm),
        detail: serde_json::Value::Null,
    });
    Ok(VerificationReport { constants, entries })
}
