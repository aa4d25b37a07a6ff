//! Round-by-round FedAvg simulation.
//!
//! A round samples the environment, asks the policy for a plan, trains the
//! participants that beat the straggler deadline, aggregates their updates,
//! evaluates the new global model and charges energy to every device.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{
    baseline_policy, compute_global_reward_energy, compute_local_reward_energy, compute_reward, oracle_plan,
    random_plan, select_round, update_q, LearnerConfig, OptionCost, OracleScope, Policy, QTables, RewardInputs,
    RoundEnv, RoundPlan,
};
use crate::data::{DataPartition, TrainTest};
use crate::energy::{breakdown, EnergyBreakdown, ExecutionRecord};
use crate::error::{Result, SimError};
use crate::fleet::{DeviceId, ExecutionTarget, Fleet};
use crate::rng::{mix, Stream};
use crate::state::{encode_global, encode_local, GlobalState, StateVector};
use crate::training::{evaluate, fedavg_aggregate, local_train, GlobalParams, ModelShape, ModelState, WorkloadSpec};
use crate::variance::{DeviceConditions, VarianceSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Participants slower than this multiple of the median latency are dropped.
    pub straggler_multiplier: f64,
    pub stop_at_target: bool,
    /// Also solve the full oracle each round and record whether the plan matches it.
    pub oracle_trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            straggler_multiplier: 3.0,
            stop_at_target: true,
            oracle_trace: false,
        }
    }
}

/// Everything a run needs apart from the policy and seed.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub fleet: Fleet,
    pub workload: WorkloadSpec,
    pub global: GlobalParams,
    pub data: TrainTest,
    pub partition: DataPartition,
    pub variance: VarianceSpec,
    pub learner: LearnerConfig,
    pub engine: EngineConfig,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let n = self.fleet.len();
        self.global.validate(n)?;
        self.learner.validate()?;
        if !self.workload.is_trainable() {
            return Err(SimError::config(
                "workload",
                format!("`{}` has recurrent layers and is descriptor-only", self.workload.name),
            ));
        }
        if self.partition.assignment.len() != n {
            return Err(SimError::DimensionMismatch {
                expected: n,
                actual: self.partition.assignment.len(),
            });
        }
        if self.partition.assignment.iter().any(Vec::is_empty) {
            return Err(SimError::precondition("every device needs at least one sample"));
        }
        if !(self.engine.straggler_multiplier >= 1.0) {
            return Err(SimError::config("engine.straggler_multiplier", "must be at least 1"));
        }
        Ok(())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape::new(self.data.train.dim(), self.data.train.num_classes(), &self.workload.arch)
    }

    pub fn conditions(&self, seed: u64, round: u64) -> Vec<DeviceConditions> {
        self.fleet.ids().map(|d| self.variance.sample(seed, round, d)).collect()
    }

    pub fn states(&self, global: GlobalState, conditions: &[DeviceConditions]) -> Vec<StateVector> {
        let classes = self.data.train.num_classes();
        conditions
            .iter()
            .zip(&self.partition.classes_present)
            .map(|(c, present)| StateVector {
                global,
                local: encode_local(&c.interference, &c.network, present.len(), classes),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub plan: RoundPlan,
    pub conditions: Vec<DeviceConditions>,
    /// One record per device, in id order.
    pub records: Vec<ExecutionRecord>,
    pub energy: Vec<EnergyBreakdown>,
    pub t_round: f64,
    /// Test accuracy of the post-aggregation model, percent.
    pub accuracy: f64,
    /// Participants cut by the straggler deadline.
    pub excluded: Vec<DeviceId>,
    /// Participants whose local training diverged.
    pub dropped: Vec<DeviceId>,
    pub rewards: BTreeMap<DeviceId, f64>,
    /// Whether the plan had the full oracle's tier mix and processor split.
    pub oracle_match: Option<bool>,
}

impl RoundOutcome {
    pub fn total_energy(&self) -> f64 {
        self.energy.iter().map(|e| e.total).sum()
    }

    /// True when no update reached the server.
    pub fn skipped(&self) -> bool {
        self.excluded.len() + self.dropped.len() == self.plan.len()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.values().sum::<f64>() / self.rewards.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub policy: Policy,
    pub seed: u64,
    pub target_accuracy: f64,
    pub initial_accuracy: f64,
    /// Energy of the round-0 random plan used to scale rewards.
    pub normalizer: f64,
    pub outcomes: Vec<RoundOutcome>,
    /// Rounds completed when the target was first reached.
    pub convergence_round: Option<usize>,
}

impl RunReport {
    pub fn rounds(&self) -> usize {
        self.outcomes.len()
    }

    pub fn total_energy(&self) -> f64 {
        self.outcomes.iter().map(RoundOutcome::total_energy).sum()
    }

    pub fn energy_to_convergence(&self) -> Option<f64> {
        self.convergence_round
            .map(|r| self.outcomes[..r].iter().map(RoundOutcome::total_energy).sum())
    }

    pub fn final_accuracy(&self) -> f64 {
        self.outcomes.last().map_or(self.initial_accuracy, |o| o.accuracy)
    }

    /// Rounds per joule over the rounds from `skip` on.
    pub fn ppw_per_round(&self, skip: usize) -> Option<f64> {
        let tail = self.outcomes.get(skip..).filter(|t| !t.is_empty())?;
        let energy: f64 = tail.iter().map(RoundOutcome::total_energy).sum();
        crate::energy::ppw(tail.len() as f64, energy).ok()
    }

    /// Inverse of the energy spent reaching the target.
    pub fn ppw_convergence(&self) -> Option<f64> {
        crate::energy::ppw(1.0, self.energy_to_convergence()?).ok()
    }

    /// Fraction of traced rounds whose plan matched the oracle's composition.
    pub fn prediction_accuracy(&self) -> Option<f64> {
        let traced: Vec<bool> = self.outcomes.iter().filter_map(|o| o.oracle_match).collect();
        (!traced.is_empty()).then(|| traced.iter().filter(|&&m| m).count() as f64 / traced.len() as f64)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Splits a round's participants at `multiplier` times their median latency.
/// Returns the included ids, the excluded ids and the round time.
pub fn apply_deadline(costs: &BTreeMap<DeviceId, OptionCost>, multiplier: f64) -> (Vec<DeviceId>, Vec<DeviceId>, f64) {
    if costs.is_empty() {
        return (Vec::new(), Vec::new(), 0.0);
    }
    let mut latencies: Vec<f64> = costs.values().map(OptionCost::latency).collect();
    let deadline = multiplier * median(&mut latencies);
    let (included, excluded): (Vec<_>, Vec<_>) = costs.keys().partition(|d| costs[*d].latency() <= deadline);
    let t_round = included.iter().map(|d| costs[d].latency()).fold(0.0, f64::max);
    (included, excluded, t_round)
}


/// Applies the previous round's Q updates. A device's next action is the one
/// `plan` gives it, or its greedy action when it sits the round out.
fn apply_pending(
    scenario: &Scenario,
    tables: &mut Option<QTables>,
    pending: &mut Vec<PendingUpdate>,
    states: &[StateVector],
    plan: Option<&RoundPlan>,
) -> Result<()> {
    let Some(tables) = tables else { return Ok(()) };
    let fleet = &scenario.fleet;
    let learner = &scenario.learner;
    for u in std::mem::take(pending) {
        let next = states[u.device.index()];
        let next_action = match plan.and_then(|p| p.actions.get(&u.device)) {
            Some(&a) => a,
            None => tables.best_action(u.device, next, fleet.device(u.device).actions()).expect("device has actions").0,
        };
        update_q(
            tables,
            u.device,
            u.state,
            u.action,
            u.reward,
            next,
            next_action,
            learner.learning_rate,
            learner.discount,
        )?;
    }
    Ok(())
}

/// One run of one policy.
pub struct Simulation<'a> {
    scenario: &'a Scenario,
    policy: Policy,
    seed: u64,
    model: ModelState,
    tables: Option<QTables>,
    global_state: GlobalState,
    shard_sizes: Vec<usize>,
    normalizer: f64,
    accuracy: f64,
    initial_accuracy: f64,
    round: usize,
    pending: Vec<PendingUpdate>,
}

/// A participant's transition awaiting the next round's action.
struct PendingUpdate {
    device: DeviceId,
    state: StateVector,
    action: ExecutionTarget,
    reward: f64,
}

impl<'a> Simulation<'a> {
    pub fn new(scenario: &'a Scenario, policy: Policy, seed: u64) -> Result<Self> {
        scenario.validate()?;
        let model = ModelState::init(scenario.model_shape(), seed);
        let accuracy = evaluate(&model, &scenario.data.test)?;
        let shard_sizes = scenario.partition.shard_sizes();
        let conditions = scenario.conditions(seed, 0);
        let env = RoundEnv {
            fleet: &scenario.fleet,
            workload: &scenario.workload,
            global: &scenario.global,
            conditions: &conditions,
            shard_sizes: &shard_sizes,
        };
        let normalizer = env.plan_energy(&random_plan(&scenario.fleet, scenario.global.participants, seed, 0))?;
        let tables = (policy == Policy::AutoFl).then(|| {
            if scenario.learner.shared_tables {
                QTables::shared(&scenario.fleet, seed)
            } else {
                QTables::per_device(&scenario.fleet, seed)
            }
        });
        Ok(Simulation {
            scenario,
            policy,
            seed,
            model,
            tables,
            global_state: encode_global(&scenario.workload, &scenario.global),
            shard_sizes,
            normalizer,
            accuracy,
            initial_accuracy: accuracy,
            round: 0,
            pending: Vec::new(),
        })
    }

    /// Replaces the fresh Q-tables with previously learned ones.
    pub fn with_tables(mut self, tables: QTables) -> Self {
        if self.tables.is_some() {
            self.tables = Some(tables);
        }
        self
    }

    pub fn with_model(mut self, model: ModelState) -> Result<Self> {
        model.check()?;
        if model.shape != self.model.shape {
            return Err(SimError::DimensionMismatch {
                expected: self.model.shape.parameter_count(),
                actual: model.parameters.len(),
            });
        }
        self.accuracy = evaluate(&model, &self.scenario.data.test)?;
        self.initial_accuracy = self.accuracy;
        self.model = model;
        Ok(self)
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn tables(&self) -> Option<&QTables> {
        self.tables.as_ref()
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let sc = self.scenario;
        let r = self.round as u64;
        let k = sc.global.participants;
        let conditions = sc.conditions(self.seed, r);
        let states = sc.states(self.global_state, &conditions);
        let env = RoundEnv {
            fleet: &sc.fleet,
            workload: &sc.workload,
            global: &sc.global,
            conditions: &conditions,
            shard_sizes: &self.shard_sizes,
        };

        let plan = match &self.tables {
            Some(tables) => select_round(tables, &sc.fleet, &states, k, sc.learner.epsilon, self.seed, r)?,
            None => baseline_policy(self.policy, &env, k, self.seed, r)?,
        };
        apply_pending(sc, &mut self.tables, &mut self.pending, &states, Some(&plan))?;
        let oracle_match = if !sc.engine.oracle_trace {
            None
        } else if self.policy == Policy::OFl {
            Some(true)
        } else {
            let (oracle, _) = oracle_plan(&env, OracleScope::AllTargets, k, self.seed, r)?;
            Some(plan.matches_composition(&oracle, &sc.fleet))
        };

        let mut costs = BTreeMap::new();
        for (&d, &a) in &plan.actions {
            costs.insert(d, env.option_cost(d, a)?);
        }
        let (included, excluded, t_round) = apply_deadline(&costs, sc.engine.straggler_multiplier);

        let results: Vec<(DeviceId, Result<_>)> = included
            .par_iter()
            .map(|&d| {
                let update = local_train(
                    &self.model,
                    &sc.data.train,
                    &sc.partition.assignment[d.index()],
                    sc.global.batch_size,
                    sc.global.local_epochs,
                    sc.workload.learning_rate,
                    mix(self.seed, Stream::Training, r, d.0 as u64),
                );
                (d, update)
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut dropped = Vec::new();
        for (d, res) in results {
            match res {
                Ok(u) => updates.push(u),
                Err(SimError::NonFiniteLoss) => dropped.push(d),
                Err(e) => return Err(e),
            }
        }
        if let Some(parameters) = fedavg_aggregate(&updates)? {
            self.model.parameters = parameters;
            self.model.version += 1;
        }
        let accuracy = evaluate(&self.model, &sc.data.test)?;

        let excluded_set: BTreeSet<DeviceId> = excluded.iter().copied().collect();
        let mut records = Vec::with_capacity(sc.fleet.len());
        let mut energy = Vec::with_capacity(sc.fleet.len());
        for d in sc.fleet.ids() {
            let signal = conditions[d.index()].network.signal;
            let record = match plan.actions.get(&d) {
                None => ExecutionRecord::idle(d, signal, t_round),
                Some(&a) if excluded_set.contains(&d) => ExecutionRecord {
                    device: d,
                    target: Some(a),
                    busy: BTreeMap::from([(a.step, t_round)]),
                    idle_s: 0.0,
                    tx_s: 0.0,
                    signal,
                    round_s: t_round,
                },
                Some(&a) => {
                    let c = costs[&d];
                    ExecutionRecord::participant(d, a, c.compute_s, c.tx_s, signal, t_round)
                }
            };
            energy.push(breakdown(sc.fleet.device(d), &record)?);
            records.push(record);
        }

        let locals: Vec<f64> = sc
            .fleet
            .ids()
            .map(|d| compute_local_reward_energy(&plan, d, &energy[d.index()]))
            .collect();
        let global_energy = compute_global_reward_energy(&locals);
        let mut rewards = BTreeMap::new();
        for &d in plan.actions.keys() {
            let inputs = RewardInputs {
                r_energy_local: locals[d.index()],
                r_energy_global: global_energy,
                r_accuracy: accuracy,
                r_accuracy_prev: self.accuracy,
            };
            rewards.insert(d, compute_reward(&inputs, sc.learner.alpha, sc.learner.beta, self.normalizer)?);
        }

        if self.tables.is_some() {
            self.pending = plan
                .actions
                .iter()
                .map(|(&d, &a)| PendingUpdate {
                    device: d,
                    state: states[d.index()],
                    action: a,
                    reward: rewards[&d],
                })
                .collect();
        }

        self.accuracy = accuracy;
        self.round += 1;
        Ok(RoundOutcome {
            round: r as usize,
            plan,
            conditions,
            records,
            energy,
            t_round,
            accuracy,
            excluded,
            dropped,
            rewards,
            oracle_match,
        })
    }

    /// Runs until `max_rounds` or, when configured, the target accuracy.
    pub fn run(mut self, max_rounds: usize) -> Result<(RunReport, Option<QTables>)> {
        let target = self.scenario.global.target_accuracy;
        let mut outcomes = Vec::new();
        let mut convergence_round = None;
        while self.round < max_rounds {
            let outcome = self.run_round()?;
            if convergence_round.is_none() && outcome.accuracy >= target {
                convergence_round = Some(self.round);
            }
            outcomes.push(outcome);
            if convergence_round.is_some() && self.scenario.engine.stop_at_target {
                break;
            }
        }
        if !self.pending.is_empty() {
            let states = self.scenario.states(self.global_state, &self.scenario.conditions(self.seed, self.round as u64));
            apply_pending(self.scenario, &mut self.tables, &mut self.pending, &states, None)?;
        }
        let report = RunReport {
            policy: self.policy,
            seed: self.seed,
            target_accuracy: target,
            initial_accuracy: self.initial_accuracy,
            normalizer: self.normalizer,
            outcomes,
            convergence_round,
        };
        Ok((report, self.tables))
    }
}

/// Runs one policy on one seed for the scenario's round budget.
pub fn run_experiment(scenario: &Scenario, policy: Policy, seed: u64) -> Result<RunReport> {
    let rounds = scenario.global.max_rounds;
    Ok(Simulation::new(scenario, policy, seed)?.run(rounds)?.0)
}
