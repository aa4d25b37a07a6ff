//! Participant and execution-target policies: the Q-learning agent plus
//! random, template and oracle baselines.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fleet::{DeviceId, ExecutionTarget, Fleet, Processor, TierCounts};
use crate::state::StateVector;

pub mod baselines;
pub mod oracle;
pub mod qtable;
pub mod reward;
pub mod select;

pub use baselines::{baseline_policy, random_plan};
pub use oracle::{oracle_plan, OptionCost, OracleScope, RoundEnv};
pub use qtable::{share_tables, QEntry, QKey, QTable, QTables, TableOwner};
pub use reward::{compute_global_reward_energy, compute_local_reward_energy, compute_reward, RewardInputs};
pub use select::select_round;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Random,
    Power,
    Performance,
    OParticipant,
    OFl,
    #[serde(rename = "autofl")]
    AutoFl,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Random,
        Policy::Power,
        Policy::Performance,
        Policy::OParticipant,
        Policy::OFl,
        Policy::AutoFl,
    ];

    /// Name used in configs and output files.
    pub fn key(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Power => "power",
            Policy::Performance => "performance",
            Policy::OParticipant => "o_participant",
            Policy::OFl => "o_fl",
            Policy::AutoFl => "autofl",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.key() == key)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Q-learning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    /// Step size of the Q update.
    pub learning_rate: f64,
    pub discount: f64,
    pub epsilon: f64,
    /// Weight of the accuracy term.
    pub alpha: f64,
    /// Weight of the accuracy-improvement term.
    pub beta: f64,
    pub shared_tables: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            learning_rate: 0.9,
            discount: 0.1,
            epsilon: 0.1,
            alpha: 1.0,
            beta: 1.0,
            shared_tables: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("discount", self.discount),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(SimError::config(format!("learner.{name}"), "must be in (0, 1]"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::config(format!("learner.{name}"), "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Participants of a round and the target each one runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundPlan {
    pub actions: BTreeMap<DeviceId, ExecutionTarget>,
    /// Set when the plan came from an exploration round.
    pub explored: bool,
}

impl RoundPlan {
    pub fn new(actions: impl IntoIterator<Item = (DeviceId, ExecutionTarget)>) -> Self {
        RoundPlan {
            actions: actions.into_iter().collect(),
            explored: false,
        }
    }

    pub fn selected(&self) -> Vec<DeviceId> {
        self.actions.keys().copied().collect()
    }

    pub fn contains(&self, device: DeviceId) -> bool {
        self.actions.contains_key(&device)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Number of participants on each processor, `(cpu, gpu)`.
    pub fn processor_counts(&self) -> (usize, usize) {
        let gpu = self.actions.values().filter(|t| t.processor == Processor::Gpu).count();
        (self.actions.len() - gpu, gpu)
    }

    /// Tier histogram plus per-tier processor counts.
    pub fn composition(&self, fleet: &Fleet) -> (TierCounts, [(usize, usize); 3]) {
        let mut per_tier = [(0, 0); 3];
        for (d, t) in &self.actions {
            let slot = &mut per_tier[fleet.device(*d).tier.index()];
            match t.processor {
                Processor::Cpu => slot.0 += 1,
                Processor::Gpu => slot.1 += 1,
            }
        }
        (fleet.histogram(&self.selected()), per_tier)
    }

    /// Same tier mix and the same processor split within every tier.
    pub fn matches_composition(&self, other: &RoundPlan, fleet: &Fleet) -> bool {
        self.composition(fleet) == other.composition(fleet)
    }
}

/// Applies one Q update for `device`; the next-state value is read from the
/// same table. Returns the new value.
#[allow(clippy::too_many_arguments)]
pub fn update_q(
    tables: &mut QTables,
    device: DeviceId,
    state: StateVector,
    action: ExecutionTarget,
    reward: f64,
    next_state: StateVector,
    next_action: ExecutionTarget,
    gamma: f64,
    mu: f64,
) -> Result<f64> {
    let next = tables.value(device, next_state, next_action);
    tables.table_mut(device).update(QKey::new(state, action), reward, next, gamma, mu)
}
