//! Deterministic federated-learning fleet simulator.
//!
//! Each aggregation round a policy picks K participants from a heterogeneous
//! device fleet and an execution target (processor and DVFS step) for each.
//! The engine trains a real desk-scale model with FedAvg, charges compute,
//! communication and idle energy to every device, and feeds accuracy and
//! energy back to the learning controller.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod data;
pub mod energy;
pub mod engine;
pub mod error;
pub mod fleet;
pub mod rng;
pub mod state;
pub mod sweep;
pub mod training;
pub mod variance;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use controller::{LearnerConfig, Policy, RoundPlan};
pub use engine::{run_experiment, EngineConfig, RoundOutcome, RunReport, Scenario, Simulation};
pub use error::{Result, SimError};
pub use sweep::{run_sweep, SweepOutput};
