//! Fixed and oracle baseline policies.

use rand::seq::index;

use crate::error::Result;
use crate::fleet::{instantiate_cluster, ClusterTemplate, DeviceId, Fleet, Processor};
use crate::rng::{keyed_rng, mix, Stream};

use super::oracle::{oracle_plan, OracleScope, RoundEnv};
use super::{Policy, RoundPlan};

fn cpu_max(fleet: &Fleet, ids: impl IntoIterator<Item = DeviceId>) -> RoundPlan {
    RoundPlan::new(ids.into_iter().map(|d| (d, fleet.device(d).max_target(Processor::Cpu))))
}

/// `k` uniformly random devices at their highest CPU step.
pub fn random_plan(fleet: &Fleet, k: usize, seed: u64, round: u64) -> RoundPlan {
    let mut rng = keyed_rng(seed, Stream::Baseline, round, 0);
    let k = k.min(fleet.len());
    cpu_max(fleet, index::sample(&mut rng, fleet.len(), k).into_iter().map(|i| DeviceId(i as u32)))
}

/// Plan of a non-learning policy for one round. `AutoFl` is not a baseline and
/// falls back to the random plan.
pub fn baseline_policy(kind: Policy, env: &RoundEnv, k: usize, seed: u64, round: u64) -> Result<RoundPlan> {
    let fleet = env.fleet;
    let cluster_seed = mix(seed, Stream::Cluster, round, 0);
    match kind {
        Policy::Random | Policy::AutoFl => Ok(random_plan(fleet, k, seed, round)),
        Policy::Power => Ok(cpu_max(fleet, instantiate_cluster(fleet, ClusterTemplate::C7, k, cluster_seed)?)),
        Policy::Performance => Ok(cpu_max(fleet, instantiate_cluster(fleet, ClusterTemplate::C1, k, cluster_seed)?)),
        Policy::OParticipant => Ok(oracle_plan(env, OracleScope::CpuMax, k, seed, round)?.0),
        Policy::OFl => Ok(oracle_plan(env, OracleScope::AllTargets, k, seed, round)?.0),
    }
}
