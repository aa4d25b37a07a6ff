//! Epsilon-greedy participant and target selection.

use rand::seq::index;
use rand::Rng;

use crate::error::{Result, SimError};
use crate::fleet::{DeviceId, ExecutionTarget, Fleet};
use crate::rng::{keyed_rng, Stream};
use crate::state::StateVector;

use super::qtable::QTables;
use super::RoundPlan;

/// Picks `k` participants and their targets.
///
/// With probability `epsilon` the whole round explores: random devices with
/// random actions. Otherwise devices are ranked by their best Q-value and the
/// top `k` run their argmax action. Equal scores are ordered by a random key
/// drawn for every device each round.
pub fn select_round(
    tables: &QTables,
    fleet: &Fleet,
    states: &[StateVector],
    k: usize,
    epsilon: f64,
    seed: u64,
    round: u64,
) -> Result<RoundPlan> {
    if k > fleet.len() {
        return Err(SimError::precondition(format!("cannot select {k} of {} devices", fleet.len())));
    }
    if states.len() != fleet.len() {
        return Err(SimError::DimensionMismatch {
            expected: fleet.len(),
            actual: states.len(),
        });
    }
    let mut rng = keyed_rng(seed, Stream::Selection, round, 0);
    let explore = rng.random::<f64>() < epsilon;
    let ties: Vec<u64> = (0..fleet.len()).map(|_| rng.random()).collect();

    if explore {
        let mut actions = Vec::with_capacity(k);
        for i in index::sample(&mut rng, fleet.len(), k) {
            let profile = &fleet.devices()[i];
            let pick = rng.random_range(0..profile.action_count());
            let action = profile.actions().nth(pick).expect("index below action count");
            actions.push((profile.id, action));
        }
        let mut plan = RoundPlan::new(actions);
        plan.explored = true;
        return Ok(plan);
    }

    let mut scored: Vec<(f64, u64, DeviceId, ExecutionTarget)> = fleet
        .devices()
        .iter()
        .filter_map(|p| {
            tables
                .best_action(p.id, states[p.id.index()], p.actions())
                .map(|(a, q)| (q, ties[p.id.index()], p.id, a))
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(RoundPlan::new(scored.into_iter().take(k).map(|(_, _, d, a)| (d, a))))
}
