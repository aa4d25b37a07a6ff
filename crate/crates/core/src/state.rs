//! Discretized RL state.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::training::{GlobalParams, WorkloadSpec};
use crate::variance::{InterferenceState, NetworkCondition, SignalLevel};

/// Bucket counts of the global features `(conv, fc, rc, b, e, k)`.
pub const GLOBAL_BUCKETS: [u8; 6] = [4, 2, 3, 3, 3, 3];
/// Bucket counts of the local features `(co_cpu, co_mem, network, data)`.
pub const LOCAL_BUCKETS: [u8; 4] = [4, 4, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GlobalState {
    pub conv: u8,
    pub fc: u8,
    pub rc: u8,
    pub batch: u8,
    pub epochs: u8,
    pub participants: u8,
}

impl GlobalState {
    pub fn as_array(&self) -> [u8; 6] {
        [self.conv, self.fc, self.rc, self.batch, self.epochs, self.participants]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocalState {
    pub co_cpu: u8,
    pub co_mem: u8,
    pub network: u8,
    pub data: u8,
}

impl LocalState {
    pub fn as_array(&self) -> [u8; 4] {
        [self.co_cpu, self.co_mem, self.network, self.data]
    }
}

impl fmt::Display for GlobalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.as_array();
        write!(f, "{}{}{}{}{}{}", a[0], a[1], a[2], a[3], a[4], a[5])
    }
}

impl fmt::Display for LocalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.as_array();
        write!(f, "{}{}{}{}", a[0], a[1], a[2], a[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateVector {
    pub global: GlobalState,
    pub local: LocalState,
}

/// Index of the first threshold `value` falls below, or the count of thresholds.
fn bucket(value: f64, upper_bounds: &[f64]) -> u8 {
    upper_bounds.iter().take_while(|&&b| value >= b).count() as u8
}

/// CONV: small <10, medium <20, large <40 (the 30..40 gap folds into large), larger otherwise.
pub fn conv_bucket(layers: usize) -> u8 {
    bucket(layers as f64, &[10.0, 20.0, 40.0])
}

pub fn encode_global(workload: &WorkloadSpec, params: &GlobalParams) -> GlobalState {
    GlobalState {
        conv: conv_bucket(workload.conv_layers),
        fc: bucket(workload.fc_layers as f64, &[10.0]),
        rc: bucket(workload.rc_layers as f64, &[5.0, 10.0]),
        batch: bucket(params.batch_size as f64, &[8.0, 32.0]),
        epochs: bucket(params.local_epochs as f64, &[5.0, 10.0]),
        participants: bucket(params.participants as f64, &[10.0, 50.0]),
    }
}

/// none at exactly zero, then small <25%, medium <75%, large.
fn utilization_bucket(u: f64) -> u8 {
    if u <= 0.0 || u.is_nan() {
        0
    } else {
        1 + bucket(u, &[0.25, 0.75])
    }
}

pub fn encode_local(
    interference: &InterferenceState,
    network: &NetworkCondition,
    classes_present: usize,
    total_classes: usize,
) -> LocalState {
    let data = if total_classes == 0 || classes_present >= total_classes {
        2
    } else if (classes_present as f64) < 0.25 * total_classes as f64 {
        0
    } else {
        1
    };
    LocalState {
        co_cpu: utilization_bucket(interference.co_cpu),
        co_mem: utilization_bucket(interference.co_mem),
        network: match network.signal {
            SignalLevel::Regular => 0,
            SignalLevel::Bad => 1,
        },
        data,
    }
}
