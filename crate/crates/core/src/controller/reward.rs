//! Energy and accuracy reward terms.

use crate::energy::EnergyBreakdown;
use crate::error::{Result, SimError};
use crate::fleet::DeviceId;

use super::RoundPlan;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardInputs {
    pub r_energy_local: f64,
    pub r_energy_global: f64,
    /// Percent.
    pub r_accuracy: f64,
    pub r_accuracy_prev: f64,
}

/// Participants are charged compute and communication, everyone else idle.
pub fn compute_local_reward_energy(plan: &RoundPlan, device: DeviceId, breakdown: &EnergyBreakdown) -> f64 {
    if plan.contains(device) {
        breakdown.e_comp + breakdown.e_comm
    } else {
        breakdown.e_idle
    }
}

pub fn compute_global_reward_energy(locals: &[f64]) -> f64 {
    locals.iter().sum()
}

pub fn compute_reward(inputs: &RewardInputs, alpha: f64, beta: f64, normalizer: f64) -> Result<f64> {
    if !(normalizer > 0.0) {
        return Err(SimError::precondition("reward normalizer must be positive"));
    }
    let gain = inputs.r_accuracy - inputs.r_accuracy_prev;
    if gain <= 0.0 {
        return Ok(inputs.r_accuracy - 100.0);
    }
    Ok(-(inputs.r_energy_global / normalizer) - (inputs.r_energy_local / normalizer)
        + alpha * inputs.r_accuracy
        + beta * gain)
}
