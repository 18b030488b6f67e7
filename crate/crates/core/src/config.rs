//! Experiment configuration: a JSON document with strict keys and dotted
//! command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveKind, PartitionMode, DEFAULT_LAMBDA};
use crate::schedules::{validate_schedule, ScheduleParams, ScheduleViolation};
use crate::wireless::{ChannelMode, ChannelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Zofl,
    Fedavg,
}

/// Step sizes: the power-law pair for 1P-ZOFL or a constant `eta` for FedAvg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    PowerLaw { alpha0: f64, upsilon1: f64, gamma0: f64, upsilon2: f64 },
    Fedavg {
        eta: f64,
        #[serde(default)]
        full_batch: bool,
    },
}

impl ScheduleConfig {
    pub fn power_law(&self) -> Option<ScheduleParams<f64>> {
        match *self {
            ScheduleConfig::PowerLaw { alpha0, upsilon1, gamma0, upsilon2 } => {
                Some(ScheduleParams { alpha0, upsilon1, gamma0, upsilon2 })
            }
            ScheduleConfig::Fedavg { .. } => None,
        }
    }
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_theta_box() -> f64 {
    5.0
}

/// Objective family, the model box its constants are computed on, and
/// optional overrides of those constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_theta_box")]
    pub theta_box: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_l_s: Option<f64>,
}

fn default_test_size() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Two Gaussian blobs; a fresh test set of `test_size` samples per seed.
    Synthetic {
        train_size: usize,
        #[serde(default = "default_test_size")]
        test_size: usize,
        separation: f64,
    },
    /// Training rows from `train_path`; test rows from `test_path`, if given.
    Csv {
        train_path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
    },
    /// Per-device quadratics around random targets.
    Quadratic { target_spread: f64, rows_per_device: usize, jitter: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownlinkConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub sigma: f64,
}

impl Default for DownlinkConfig {
    fn default() -> Self {
        DownlinkConfig { enabled: false, sigma: 0.0 }
    }
}

fn default_gamma() -> f64 {
    0.1
}
fn default_bias_samples() -> usize {
    200_000
}
fn default_moment_samples() -> usize {
    100_000
}
fn default_checkpoints() -> Vec<u64> {
    vec![0, 100, 1000]
}
fn default_terms() -> u64 {
    201
}
fn default_replays() -> usize {
    1000
}
fn default_inner() -> usize {
    100
}

/// Settings of `verify-lemmas`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    /// Frozen model for the bias and second-moment checks; defaults to the
    /// first seed's initial model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_bias_samples")]
    pub bias_samples: usize,
    #[serde(default = "default_moment_samples")]
    pub moment_samples: usize,
    #[serde(default = "default_checkpoints")]
    pub martingale_checkpoints: Vec<u64>,
    /// Terms per tail sum, `k = K, ..., K + terms - 1`.
    #[serde(default = "default_terms")]
    pub martingale_terms: u64,
    #[serde(default = "default_replays")]
    pub martingale_replays: usize,
    #[serde(default = "default_inner")]
    pub martingale_inner: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults deserialize")
    }
}

fn default_one() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_init_scale() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub dim: usize,
    pub n_devices: usize,
    pub rounds: u64,
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub eval_every: u64,
    #[serde(default)]
    pub record_every: u64,
    pub seeds: Vec<u64>,
    pub channel: ChannelParams<f64>,
    #[serde(default)]
    pub channel_mode: ChannelMode,
    pub schedule: ScheduleConfig,
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionMode,
    #[serde(default)]
    pub downlink: DownlinkConfig,
    /// Standard deviation of the Gaussian initial model.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Accumulate the step-weighted gradient metric (needs `grad F` every round).
    #[serde(default = "default_true")]
    pub weighted_metric: bool,
    #[serde(default)]
    pub verification: VerificationConfig,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies `key=value` overrides in order, then validates.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cross-field checks; every violation is listed in the error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dim == 0 {
            problems.push("dim must be at least 1".to_string());
        }
        if self.n_devices == 0 {
            problems.push("n_devices must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be at least 1".to_string());
        }
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".to_string());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            problems.push("seeds must be distinct".to_string());
        }
        match self.channel.validate() {
            Err(Error::Domain(msg)) => return Err(Error::Domain(format!("channel: {msg}"))),
            Err(e) => problems.push(format!("channel: {e}")),
            Ok(()) => {}
        }
        match (&self.algorithm, &self.schedule) {
            (Algorithm::Zofl, ScheduleConfig::PowerLaw { alpha0, gamma0, .. }) => {
                if !(*alpha0 > 0.0 && *gamma0 > 0.0) {
                    problems.push("schedule.alpha0 and schedule.gamma0 must be positive".to_string());
                }
            }
            (Algorithm::Fedavg, ScheduleConfig::Fedavg { eta, .. }) => {
                if !(eta.is_finite() && *eta > 0.0) {
                    problems.push("schedule.eta must be positive and finite".to_string());
                }
            }
            (alg, _) => problems.push(format!("schedule kind does not match algorithm {alg:?}")),
        }
        match (&self.objective.kind, &self.data) {
            (ObjectiveKind::Quadratic, DataConfig::Quadratic { rows_per_device, .. }) => {
                if *rows_per_device == 0 {
                    problems.push("data.rows_per_device must be at least 1".to_string());
                }
            }
            (ObjectiveKind::LogisticNonconvex, DataConfig::Synthetic { train_size, test_size, .. }) => {
                if *train_size < self.n_devices {
                    problems.push(format!("data.train_size {train_size} is smaller than n_devices {}", self.n_devices));
                }
                if *test_size == 0 {
                    problems.push("data.test_size must be at least 1".to_string());
                }
            }
            (ObjectiveKind::LogisticNonconvex, DataConfig::Csv { .. }) => {}
            (kind, _) => problems.push(format!("data source does not match objective {kind:?}")),
        }
        if !(self.objective.theta_box > 0.0) {
            problems.push("objective.theta_box must be positive".to_string());
        }
        if self.objective.lambda < 0.0 {
            problems.push("objective.lambda must be non-negative".to_string());
        }
        if self.downlink.enabled && !(self.downlink.sigma >= 0.0) {
            problems.push("downlink.sigma must be non-negative".to_string());
        }
        if !(self.init_scale >= 0.0) {
            problems.push("init_scale must be non-negative".to_string());
        }
        if let Some(theta) = &self.verification.theta {
            if theta.len() != self.dim {
                problems.push(format!("verification.theta has length {}, dim is {}", theta.len(), self.dim));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Violated step-size conditions; advisory, since constants are free to retune.
    pub fn schedule_warnings(&self) -> Vec<ScheduleViolation> {
        self.schedule.power_law().map(|p| validate_schedule(&p).violations).unwrap_or_default()
    }

    pub fn downlink_sigma(&self) -> Option<f64> {
        self.downlink.enabled.then_some(self.downlink.sigma)
    }
}

/// Applies `a.b.c=value` to a JSON document. `value` is parsed as JSON when
/// possible and taken as a string otherwise. Missing intermediate objects are
/// created, so defaulted sections can be overridden; unknown keys are still
/// rejected when the document is deserialized.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override key {path:?} has an empty segment")));
    }
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {path:?}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const QUADRATIC: &str = r#"{
        "name": "q",
        "algorithm": "zofl",
        "dim": 5,
        "n_devices": 3,
        "rounds": 100,
        "batch_size": 10,
        "eval_every": 10,
        "seeds": [1, 2],
        "channel": {"sigma_h": 1.0, "k_hh": 0.5, "sigma_n": 0.5},
        "schedule": {"kind": "power_law", "alpha0": 0.1, "upsilon1": 0.51, "gamma0": 1.0, "upsilon2": 0.18},
        "objective": {"kind": "quadratic"},
        "data": {"source": "quadratic", "target_spread": 1.0, "rows_per_device": 50, "jitter": 0.1}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json_str(QUADRATIC).unwrap();
        assert_eq!(c.partition, PartitionMode::Iid);
        assert_eq!(c.channel_mode, ChannelMode::PerRound);
        assert_eq!(c.verification.bias_samples, 200_000);
        assert_eq!(c.verification.martingale_checkpoints, vec![0, 100, 1000]);
        assert_eq!(c.objective.lambda, 0.001);
        assert!(c.downlink_sigma().is_none());
        assert!(c.schedule_warnings().is_empty());
    }

    #[test]
    fn roundtrip_is_identity() {
        let c = ExperimentConfig::from_json_str(QUADRATIC).unwrap();
        let again = ExperimentConfig::from_json_str(&c.to_json_string().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = QUADRATIC.replacen("\"dim\"", "\"dimm\": 4, \"dim\"", 1);
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("dimm"), "{err}");
        let nested = QUADRATIC.replacen("\"sigma_n\": 0.5", "\"sigma_n\": 0.5, \"sigma_x\": 1", 1);
        let err = ExperimentConfig::from_json_str(&nested).unwrap_err().to_string();
        assert!(err.contains("sigma_x"), "{err}");
    }

    #[test]
    fn overrides_edit_nested_values() {
        let mut v: Value = serde_json::from_str(QUADRATIC).unwrap();
        apply_override(&mut v, "channel.sigma_n=0.25").unwrap();
        apply_override(&mut v, "partition=noniid").unwrap();
        apply_override(&mut v, "seeds=[7,8,9]").unwrap();
        let c: ExperimentConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(c.channel.sigma_n, 0.25);
        assert_eq!(c.partition, PartitionMode::Noniid);
        assert_eq!(c.seeds, vec![7, 8, 9]);
        assert!(apply_override(&mut v, "rounds.x=1").is_err());
        assert!(apply_override(&mut v, "rounds").is_err());
    }

    #[test]
    fn overrides_reach_defaulted_sections() {
        let mut v: Value = serde_json::from_str(QUADRATIC).unwrap();
        apply_override(&mut v, "verification.bias_samples=20000").unwrap();
        let c: ExperimentConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(c.verification.bias_samples, 20000);
        assert_eq!(c.verification.gamma, VerificationConfig::default().gamma);
        apply_override(&mut v, "nochannel.x=1").unwrap();
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err().to_string();
        assert!(err.contains("nochannel"), "{err}");
    }

    #[test]
    fn mismatches_are_listed() {
        let text = QUADRATIC
            .replace("\"algorithm\": \"zofl\"", "\"algorithm\": \"fedavg\"")
            .replace("\"batch_size\": 10", "\"batch_size\": 0");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("schedule kind") && err.contains("batch_size"), "{err}");
        let domain = QUADRATIC.replace("\"k_hh\": 0.5", "\"k_hh\": 1.5");
        assert!(matches!(ExperimentConfig::from_json_str(&domain), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_schedule_warns_but_parses() {
        let text = QUADRATIC.replace("\"upsilon2\": 0.18", "\"upsilon2\": 0.0");
        let c = ExperimentConfig::from_json_str(&text).unwrap();
        assert!(c.schedule_warnings().contains(&ScheduleViolation::Upsilon2NotPositive));
    }
}
