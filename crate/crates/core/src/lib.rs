//! Simulator for one-point zero-order federated learning over fading
//! channels, with a FedAvg baseline and Monte-Carlo checks of the
//! estimator's bias, second moment and martingale tail.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the harness uses throughout.

pub mod analysis;
pub mod baseline;
pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod perturbation;
pub mod scalar;
pub mod schedules;
pub mod wireless;

pub use error::{Error, Result};
pub use numerics::{RngStream, Vector};
pub use scalar::Scalar;

pub type ModelVector = Vector<f64>;
pub type PerturbationVector = Vector<f64>;
pub type ChannelParams = wireless::ChannelParams<f64>;
pub type ChannelDraw = wireless::ChannelDraw<f64>;
pub type ScheduleParams = schedules::ScheduleParams<f64>;
pub type RoundRecord = engine::RoundRecord<f64>;
pub type ExperimentState = engine::ExperimentState<f64>;
pub type Problem = objectives::Problem<f64>;
pub type Dataset = objectives::Dataset<f64>;
pub type DeviceDataset = objectives::DeviceDataset<f64>;
pub type LocalObjective = objectives::LocalObjective<f64>;
pub type ZoflSettings = engine::ZoflSettings<f64>;
