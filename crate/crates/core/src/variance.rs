//! Runtime variance: co-running application interference and network bandwidth.
//!
//! Samples are pure functions of `(seed, round, device)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fleet::DeviceId;
use crate::rng::{keyed_rng, Stream};

/// Bandwidth at or below this many Mbps counts as a bad signal.
pub const BAD_SIGNAL_MBPS: f64 = 40.0;

/// Co-running application envelope for web browsing.
pub const WEB_CPU_RANGE: (f64, f64) = (0.2, 0.8);
pub const WEB_MEM_RANGE: (f64, f64) = (0.1, 0.6);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SignalLevel {
    Regular,
    Bad,
}

impl SignalLevel {
    pub fn from_bandwidth(mbps: f64) -> Self {
        if mbps <= BAD_SIGNAL_MBPS {
            SignalLevel::Bad
        } else {
            SignalLevel::Regular
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterferenceState {
    /// CPU utilization of co-running apps, `[0, 1]`.
    pub co_cpu: f64,
    /// Memory usage of co-running apps, `[0, 1]`.
    pub co_mem: f64,
}

impl InterferenceState {
    pub const NONE: InterferenceState = InterferenceState { co_cpu: 0.0, co_mem: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkCondition {
    pub bandwidth_mbps: f64,
    pub signal: SignalLevel,
}

impl NetworkCondition {
    pub fn new(bandwidth_mbps: f64) -> Self {
        NetworkCondition {
            bandwidth_mbps,
            signal: SignalLevel::from_bandwidth(bandwidth_mbps),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterferenceScenario {
    #[default]
    None,
    WebBrowsing,
}

pub fn sample_interference(
    scenario: InterferenceScenario,
    affected_fraction: f64,
    seed: u64,
    round: u64,
    device: DeviceId,
) -> InterferenceState {
    match scenario {
        InterferenceScenario::None => InterferenceState::NONE,
        InterferenceScenario::WebBrowsing => {
            let mut rng = keyed_rng(seed, Stream::Interference, round, device.0 as u64);
            let affected = rng.random::<f64>() < affected_fraction.clamp(0.0, 1.0);
            // always draw both values so the stream layout is independent of the outcome
            let cpu = rng.random_range(WEB_CPU_RANGE.0..=WEB_CPU_RANGE.1);
            let mem = rng.random_range(WEB_MEM_RANGE.0..=WEB_MEM_RANGE.1);
            if affected {
                InterferenceState { co_cpu: cpu, co_mem: mem }
            } else {
                InterferenceState::NONE
            }
        }
    }
}

/// Gaussian bandwidth clamped to at least 1 Mbps.
pub fn sample_network(mean_mbps: f64, stddev_mbps: f64, seed: u64, round: u64, device: DeviceId) -> NetworkCondition {
    let bandwidth = if stddev_mbps > 0.0 {
        let mut rng = keyed_rng(seed, Stream::Network, round, device.0 as u64);
        Normal::new(mean_mbps, stddev_mbps)
            .expect("finite positive stddev")
            .sample(&mut rng)
    } else {
        mean_mbps
    };
    NetworkCondition::new(bandwidth.max(1.0))
}

/// Runtime-variance settings of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceSpec {
    pub interference: InterferenceScenario,
    pub affected_fraction: f64,
    pub bandwidth_mean_mbps: f64,
    pub bandwidth_stddev_mbps: f64,
}

impl Default for VarianceSpec {
    fn default() -> Self {
        VarianceSpec {
            interference: InterferenceScenario::None,
            affected_fraction: 0.3,
            bandwidth_mean_mbps: 100.0,
            bandwidth_stddev_mbps: 0.0,
        }
    }
}

/// Environment state of one device in one round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceConditions {
    pub interference: InterferenceState,
    pub network: NetworkCondition,
}

impl VarianceSpec {
    pub fn sample(&self, seed: u64, round: u64, device: DeviceId) -> DeviceConditions {
        DeviceConditions {
            interference: sample_interference(self.interference, self.affected_fraction, seed, round, device),
            network: sample_network(self.bandwidth_mean_mbps, self.bandwidth_stddev_mbps, seed, round, device),
        }
    }
}
