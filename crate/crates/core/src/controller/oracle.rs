//! Ground-truth round model and the exhaustive oracle policies.
//!
//! The oracle search is exact. For a fixed round deadline `T` a participant's
//! energy only depends on its own option, so each tier contributes its `k_t`
//! cheapest devices at that deadline. Every achievable round time is some
//! option's latency, so scanning those latencies covers every plan.

use std::collections::BTreeMap;

use rand::Rng;

use crate::energy::{breakdown, compute_time, transfer_time, ExecutionRecord};
use crate::error::{Result, SimError};
use crate::fleet::{ClusterTemplate, DeviceId, ExecutionTarget, Fleet, Processor, Tier, TierCounts};
use crate::rng::{keyed_rng, Stream};
use crate::training::{GlobalParams, WorkloadSpec};
use crate::variance::DeviceConditions;

use super::RoundPlan;

/// Everything needed to evaluate a plan for one round.
#[derive(Clone, Copy, Debug)]
pub struct RoundEnv<'a> {
    pub fleet: &'a Fleet,
    pub workload: &'a WorkloadSpec,
    pub global: &'a GlobalParams,
    pub conditions: &'a [DeviceConditions],
    pub shard_sizes: &'a [usize],
}

/// Latency and energy of one device running one option.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptionCost {
    pub compute_s: f64,
    /// Download plus upload.
    pub tx_s: f64,
    pub busy_j: f64,
    pub comm_j: f64,
}

impl OptionCost {
    pub fn latency(&self) -> f64 {
        self.compute_s + self.tx_s
    }
}

impl RoundEnv<'_> {
    pub fn check(&self) -> Result<()> {
        let n = self.fleet.len();
        if self.conditions.len() != n || self.shard_sizes.len() != n {
            return Err(SimError::DimensionMismatch {
                expected: n,
                actual: self.conditions.len().min(self.shard_sizes.len()),
            });
        }
        Ok(())
    }

    pub fn option_cost(&self, device: DeviceId, target: ExecutionTarget) -> Result<OptionCost> {
        let profile = self.fleet.device(device);
        let cond = &self.conditions[device.index()];
        let compute_s = compute_time(
            self.workload,
            profile,
            target,
            &cond.interference,
            self.global,
            self.shard_sizes[device.index()],
        )?;
        let tx_s = 2.0 * transfer_time(self.workload, cond.network.bandwidth_mbps);
        Ok(OptionCost {
            compute_s,
            tx_s,
            busy_j: profile.step(target)?.busy_power * compute_s,
            comm_j: profile.tx_power(cond.network.signal)? * tx_s,
        })
    }

    /// Records of every device when all participants finish and the round
    /// lasts as long as the slowest of them.
    pub fn plan_records(&self, plan: &RoundPlan) -> Result<Vec<ExecutionRecord>> {
        let mut costs = BTreeMap::new();
        for (&d, &a) in &plan.actions {
            costs.insert(d, self.option_cost(d, a)?);
        }
        let t_round = costs.values().map(OptionCost::latency).fold(0.0, f64::max);
        Ok(self
            .fleet
            .ids()
            .map(|d| {
                let signal = self.conditions[d.index()].network.signal;
                match (plan.actions.get(&d), costs.get(&d)) {
                    (Some(&a), Some(c)) => ExecutionRecord::participant(d, a, c.compute_s, c.tx_s, signal, t_round),
                    _ => ExecutionRecord::idle(d, signal, t_round),
                }
            })
            .collect())
    }

    /// Fleet energy of a plan under the ground-truth model.
    pub fn plan_energy(&self, plan: &RoundPlan) -> Result<f64> {
        self.check()?;
        let mut total = 0.0;
        for r in self.plan_records(plan)? {
            total += breakdown(self.fleet.device(r.device), &r)?.total;
        }
        Ok(total)
    }
}

/// Which execution targets an oracle may assign.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleScope {
    /// Highest CPU step only.
    CpuMax,
    /// Every processor and step.
    AllTargets,
}

/// Options of one processor sorted by latency, with the running best of
/// `busy + comm - idle * latency`.
struct Curve {
    idle_w: f64,
    latency: Vec<f64>,
    best: Vec<(f64, ExecutionTarget)>,
}

impl Curve {
    fn new(idle_w: f64, mut options: Vec<(OptionCost, ExecutionTarget)>) -> Self {
        options.sort_by(|a, b| a.0.latency().total_cmp(&b.0.latency()).then(a.1.cmp(&b.1)));
        let mut best: Vec<(f64, ExecutionTarget)> = Vec::with_capacity(options.len());
        for (c, t) in &options {
            let v = c.busy_j + c.comm_j - idle_w * c.latency();
            match best.last() {
                Some(&(b, bt)) if b <= v => best.push((b, bt)),
                _ => best.push((v, *t)),
            }
        }
        Curve {
            idle_w,
            latency: options.iter().map(|o| o.0.latency()).collect(),
            best,
        }
    }

    /// Cheapest own energy among options finishing by `t`.
    fn at(&self, t: f64) -> Option<(f64, ExecutionTarget)> {
        let n = self.latency.partition_point(|&l| l <= t);
        (n > 0).then(|| {
            let (v, target) = self.best[n - 1];
            (v + self.idle_w * t, target)
        })
    }
}

struct Candidate {
    device: DeviceId,
    tie: u64,
    curves: Vec<Curve>,
    idle_cpu_w: f64,
}

/// Minimum-energy plan over every fixed cluster template, with its energy.
pub fn oracle_plan(env: &RoundEnv, scope: OracleScope, k: usize, seed: u64, round: u64) -> Result<(RoundPlan, f64)> {
    env.check()?;
    let fleet = env.fleet;
    let mut rng = keyed_rng(seed, Stream::Baseline, round, 1);
    let mut candidates = Vec::with_capacity(fleet.len());
    for profile in fleet.devices() {
        let d = profile.id;
        let processors: &[Processor] = match scope {
            OracleScope::CpuMax => &[Processor::Cpu],
            OracleScope::AllTargets => &[Processor::Cpu, Processor::Gpu],
        };
        let mut curves = Vec::new();
        for &p in processors {
            let targets: Vec<ExecutionTarget> = match scope {
                OracleScope::CpuMax => vec![profile.max_target(Processor::Cpu)],
                OracleScope::AllTargets => profile.actions().filter(|t| t.processor == p).collect(),
            };
            let mut options = Vec::with_capacity(targets.len());
            for t in targets {
                options.push((env.option_cost(d, t)?, t));
            }
            if !options.is_empty() {
                curves.push(Curve::new(profile.idle_power(p), options));
            }
        }
        candidates.push(Candidate {
            device: d,
            tie: rng.random(),
            curves,
            idle_cpu_w: profile.cpu_idle_power,
        });
    }
    let fleet_idle_w: f64 = candidates.iter().map(|c| c.idle_cpu_w).sum();

    let mut best: Option<(f64, RoundPlan)> = None;
    let mut first_error = None;
    for template in ClusterTemplate::FIXED {
        let want = template.scaled(k).expect("fixed template");
        if let Some(e) = infeasible(fleet, want) {
            first_error.get_or_insert(e);
            continue;
        }
        let mut deadlines: Vec<f64> = candidates
            .iter()
            .filter(|c| want.get(fleet.device(c.device).tier) > 0)
            .flat_map(|c| c.curves.iter().flat_map(|cv| cv.latency.iter().copied()))
            .collect();
        deadlines.sort_by(f64::total_cmp);
        deadlines.dedup();
        for t in deadlines {
            if let Some((estimate, plan)) = plan_at(&candidates, fleet, want, t, fleet_idle_w) {
                if best.as_ref().is_none_or(|(b, _)| estimate < *b) {
                    best = Some((estimate, plan));
                }
            }
        }
    }
    match best {
        Some((_, plan)) => {
            let energy = env.plan_energy(&plan)?;
            Ok((plan, energy))
        }
        None => Err(first_error.unwrap_or_else(|| SimError::precondition("no feasible oracle plan"))),
    }
}

fn infeasible(fleet: &Fleet, want: TierCounts) -> Option<SimError> {
    let have = fleet.counts();
    Tier::ALL.into_iter().find(|&t| want.get(t) > have.get(t)).map(|tier| SimError::InsufficientDevices {
        tier,
        needed: want.get(tier),
        available: have.get(tier),
    })
}

/// Cheapest plan whose participants all finish by `t`, with its energy bound.
fn plan_at(candidates: &[Candidate], fleet: &Fleet, want: TierCounts, t: f64, fleet_idle_w: f64) -> Option<(f64, RoundPlan)> {
    let mut total = fleet_idle_w * t;
    let mut actions = Vec::new();
    for tier in Tier::ALL {
        let need = want.get(tier);
        if need == 0 {
            continue;
        }
        let mut options: Vec<(f64, u64, DeviceId, ExecutionTarget)> = candidates
            .iter()
            .filter(|c| fleet.device(c.device).tier == tier)
            .filter_map(|c| {
                c.curves
                    .iter()
                    .filter_map(|cv| cv.at(t))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(own, target)| (own - c.idle_cpu_w * t, c.tie, c.device, target))
            })
            .collect();
        if options.len() < need {
            return None;
        }
        options.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(marginal, _, d, target) in &options[..need] {
            total += marginal;
            actions.push((d, target));
        }
    }
    Some((total, RoundPlan::new(actions)))
}
