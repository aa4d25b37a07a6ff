//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p fedsim-core --test acceptance`. Pass criterion
//! numbers as arguments to run a subset. A failing criterion is reported
//! and does not abort the binary; set `FEDSIM_ACCEPTANCE_STRICT=1` to turn
//! any failure into a non-zero exit status.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use fedsim_core::config::ExperimentConfig;
use fedsim_core::controller::{
    compute_reward, oracle_plan, select_round, update_q, OracleScope, Policy, QEntry, QKey, QTable, QTables,
    RewardInputs, RoundEnv, RoundPlan, TableOwner,
};
use fedsim_core::data::{generate_synthetic, partition, DataRegime, SyntheticSpec};
use fedsim_core::energy::{
    breakdown, compute_energy_comm, compute_energy_cpu, compute_energy_gpu, compute_energy_idle, compute_time,
    transfer_time, ExecutionRecord,
};
use fedsim_core::engine::{RunReport, Scenario, Simulation};
use fedsim_core::fleet::{
    tier_profile, ClusterTemplate, DeviceId, DeviceProfile, ExecutionTarget, Fleet, FleetSpec, FrequencyStep,
    Processor, Tier, TierCounts,
};
use fedsim_core::rng::{mix, Stream};
use fedsim_core::state::{GlobalState, LocalState, StateVector};
use fedsim_core::sweep::run_sweep;
use fedsim_core::training::{epoch_order, local_train, GlobalParams, WorkloadSpec};
use fedsim_core::variance::{
    DeviceConditions, InterferenceScenario, InterferenceState, NetworkCondition, SignalLevel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

const ENERGY_REL_TOL: f64 = 1e-9;
const REWARD_TOL: f64 = 1e-12;
const Q_TOL: f64 = 1e-9;
const FEDAVG_TOL: f64 = 1e-9;
const DIRICHLET_SEEDS: u64 = 50;
const DIRICHLET_MAX_MEDIAN_SHARE: f64 = 0.4;
const NON_IID_MIN_RATIO: f64 = 1.3;
const BANDIT_MIN_MATCH: f64 = 0.95;
const BANDIT_SEEDS: u64 = 20;
const ORACLE_ENVS: usize = 100;
const AUTOFL_MIN_VS_RANDOM: f64 = 1.5;
const AUTOFL_MIN_VS_OFL: f64 = 0.8;
const PPW_SKIP_ROUNDS: usize = 100;
const LONG_RUN_ROUNDS: usize = 300;
const SHARED_MIN_REDUCTION: f64 = 0.15;
const STABILITY_WINDOW: usize = 20;
/// Variance of the moving-average reward, in squared reward units.
const STABILITY_THRESHOLD: f64 = 1.0;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------------------------------------------------------------- 1

fn hand_profile() -> DeviceProfile {
    let mut p = tier_profile(&FleetSpec::default(), Tier::H, DeviceId(0));
    p.cpu_steps = vec![
        FrequencyStep { frequency: 1.0, busy_power: 2.0 },
        FrequencyStep { frequency: 2.0, busy_power: 3.0 },
        FrequencyStep { frequency: 2.8, busy_power: 5.5 },
    ];
    p.gpu_steps = vec![
        FrequencyStep { frequency: 0.3, busy_power: 1.0 },
        FrequencyStep { frequency: 0.7, busy_power: 2.8 },
    ];
    p.cpu_idle_power = 0.275;
    p.gpu_idle_power = 0.084;
    p.radio_tx_power = BTreeMap::from([(SignalLevel::Regular, 0.8), (SignalLevel::Bad, 1.6)]);
    p
}

fn record(target: ExecutionTarget, busy: &[(usize, f64)], idle_s: f64, tx_s: f64, signal: SignalLevel) -> ExecutionRecord {
    let busy: BTreeMap<usize, f64> = busy.iter().copied().collect();
    let round_s = busy.values().sum::<f64>() + idle_s + tx_s;
    ExecutionRecord {
        device: DeviceId(0),
        target: Some(target),
        busy,
        idle_s,
        tx_s,
        signal,
        round_s,
    }
}

/// Steps through a record's timeline one millisecond at a time.
fn integrate_ms(p: &DeviceProfile, r: &ExecutionRecord) -> f64 {
    let processor = r.target.map(|t| t.processor).unwrap_or(Processor::Cpu);
    let mut segments: Vec<(u64, f64)> = Vec::new();
    match r.target {
        None => segments.push((ms(r.round_s), p.cpu_idle_power)),
        Some(_) => {
            for (&step, &s) in &r.busy {
                segments.push((ms(s), p.steps(processor)[step].busy_power));
            }
            segments.push((ms(r.tx_s), p.radio_tx_power[&r.signal]));
            segments.push((ms(r.idle_s), p.idle_power(processor)));
        }
    }
    let mut joules = 0.0;
    for (n, watts) in segments {
        for _ in 0..n {
            joules += watts * 1e-3;
        }
    }
    joules
}

fn ms(seconds: f64) -> u64 {
    (seconds * 1000.0).round() as u64
}

fn criterion_energy() -> Verdict {
    let p = hand_profile();
    let l = tier_profile(&FleetSpec::default(), Tier::L, DeviceId(1));
    let cases: Vec<(&str, f64, f64)> = vec![
        ("cpu 1.2 s at 5.5 W", compute_energy_cpu(&p, &record(ExecutionTarget::cpu(2), &[(2, 1.2)], 0.0, 0.0, SignalLevel::Regular)).unwrap(), 6.6),
        ("cpu idle 10 s", compute_energy_cpu(&p, &record(ExecutionTarget::cpu(2), &[], 10.0, 0.0, SignalLevel::Regular)).unwrap(), 2.75),
        ("cpu two steps", compute_energy_cpu(&p, &record(ExecutionTarget::cpu(0), &[(0, 1.0), (1, 2.0)], 0.0, 0.0, SignalLevel::Regular)).unwrap(), 8.0),
        ("gpu 1 s at 2.8 W", compute_energy_gpu(&p, &record(ExecutionTarget::gpu(1), &[(1, 1.0)], 0.0, 0.0, SignalLevel::Regular)).unwrap(), 2.8),
        ("gpu all zero", compute_energy_gpu(&p, &record(ExecutionTarget::gpu(1), &[], 0.0, 0.0, SignalLevel::Regular)).unwrap(), 0.0),
        ("gpu idle 5 s", compute_energy_gpu(&p, &record(ExecutionTarget::gpu(1), &[], 5.0, 0.0, SignalLevel::Regular)).unwrap(), 0.42),
        ("comm regular 2 s", compute_energy_comm(&p, &record(ExecutionTarget::cpu(0), &[], 0.0, 2.0, SignalLevel::Regular)).unwrap(), 1.6),
        ("comm zero", compute_energy_comm(&p, &record(ExecutionTarget::cpu(0), &[], 0.0, 0.0, SignalLevel::Regular)).unwrap(), 0.0),
        ("comm bad 2 s", compute_energy_comm(&p, &record(ExecutionTarget::cpu(0), &[], 0.0, 2.0, SignalLevel::Bad)).unwrap(), 3.2),
        ("idle 60 s", compute_energy_idle(&p, 60.0), 16.5),
        ("idle zero", compute_energy_idle(&p, 0.0), 0.0),
        ("idle L 100 s", compute_energy_idle(&l, 100.0), 18.0),
    ];
    let mut worst = 0.0f64;
    for (name, got, want) in &cases {
        let err = if *want == 0.0 { got.abs() } else { rel_err(*got, *want) };
        if err > ENERGY_REL_TOL {
            return verdict(false, format!("{name}: got {got}, want {want}"));
        }
        worst = worst.max(err);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fleet_spec = FleetSpec::default();
    let mut worst_random = 0.0f64;
    for i in 0..200 {
        let tier = Tier::ALL[i % 3];
        let prof = tier_profile(&fleet_spec, tier, DeviceId(0));
        let signal = if rng.random::<bool>() { SignalLevel::Regular } else { SignalLevel::Bad };
        let rec = if i % 5 == 0 {
            ExecutionRecord::idle(DeviceId(0), signal, rng.random_range(0..20_000) as f64 / 1000.0)
        } else {
            let processor = if rng.random::<bool>() { Processor::Cpu } else { Processor::Gpu };
            let steps = prof.steps(processor).len();
            let target = ExecutionTarget { processor, step: rng.random_range(0..steps) };
            let busy: Vec<(usize, f64)> = (0..rng.random_range(1..=3))
                .map(|_| (rng.random_range(0..steps), rng.random_range(0..5_000) as f64 / 1000.0))
                .collect::<BTreeMap<_, _>>()
                .into_iter()
                .collect();
            record(target, &busy, rng.random_range(0..5_000) as f64 / 1000.0, rng.random_range(0..3_000) as f64 / 1000.0, signal)
        };
        let got = breakdown(&prof, &rec).unwrap().total;
        let want = integrate_ms(&prof, &rec);
        let err = if want == 0.0 { got.abs() } else { rel_err(got, want) };
        if err > ENERGY_REL_TOL {
            return verdict(false, format!("random record {i}: breakdown {got}, integration {want}"));
        }
        worst_random = worst_random.max(err);
    }
    verdict(
        true,
        format!("{} hand cases (max rel err {worst:.1e}), 200 random records vs 1 ms integration (max rel err {worst_random:.1e})", cases.len()),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_reward() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let acc = rng.random_range(0.0..=100.0);
        let prev = if i % 10 == 0 { acc } else { rng.random_range(acc..=100.0) };
        let inputs = RewardInputs {
            r_energy_local: rng.random_range(0.0..500.0),
            r_energy_global: rng.random_range(0.0..5000.0),
            r_accuracy: acc,
            r_accuracy_prev: prev,
        };
        let norm = rng.random_range(1.0..1000.0);
        let r = compute_reward(&inputs, rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), norm).unwrap();
        if r != acc - 100.0 {
            return verdict(false, format!("penalty case {i}: {r} != {}", acc - 100.0));
        }
    }
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let prev = rng.random_range(0.0..99.0);
        let acc = rng.random_range(prev + 1e-6..=100.0);
        let (el, eg) = (rng.random_range(0.0..500.0), rng.random_range(0.0..5000.0));
        let (alpha, beta, norm) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(1.0..1000.0));
        let inputs = RewardInputs {
            r_energy_local: el,
            r_energy_global: eg,
            r_accuracy: acc,
            r_accuracy_prev: prev,
        };
        let r = compute_reward(&inputs, alpha, beta, norm).unwrap();
        let want = alpha * acc + beta * (acc - prev) - eg / norm - el / norm;
        let err = (r - want).abs() / want.abs().max(1.0);
        if err > REWARD_TOL {
            return verdict(false, format!("improving case {i}: {r} vs {want}"));
        }
        worst = worst.max(err);
    }
    let example = RewardInputs {
        r_energy_local: 10.0,
        r_energy_global: 100.0,
        r_accuracy: 75.0,
        r_accuracy_prev: 70.0,
    };
    let r = compute_reward(&example, 1.0, 1.0, 100.0).unwrap();
    if (r - 78.9).abs() > REWARD_TOL {
        return verdict(false, format!("worked example gave {r}, want 78.9"));
    }
    verdict(true, format!("1000 penalty cases exact, 1000 improving cases max err {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn quiet_state() -> StateVector {
    StateVector {
        global: GlobalState {
            conv: 0,
            fc: 0,
            rc: 0,
            batch: 1,
            epochs: 1,
            participants: 0,
        },
        local: LocalState {
            co_cpu: 0,
            co_mem: 0,
            network: 0,
            data: 2,
        },
    }
}

fn criterion_q_update() -> Verdict {
    let key = QKey::new(quiet_state(), ExecutionTarget::cpu(0));
    let single = |q0: f64, r: f64, next: f64, gamma: f64, mu: f64| {
        let mut t = QTable::new(TableOwner::Device(DeviceId(0)), 0);
        t.set(key, QEntry { value: q0, visits: 0 }).unwrap();
        t.update(key, r, next, gamma, mu).unwrap()
    };
    for (q0, r, next, gamma, mu, want) in [
        (0.0, 10.0, 0.0, 0.9, 0.1, 9.0),
        (5.0, 1.0, 2.0, 0.9, 0.1, 1.58),
        (3.0, 0.0, 3.0, 0.9, 1.0, 3.0),
    ] {
        let got = single(q0, r, next, gamma, mu);
        if (got - want).abs() > 1e-12 {
            return verdict(false, format!("Q={q0}, R={r}, Q'={next}: got {got}, want {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (q0, r, next) = (rng.random_range(-50.0..50.0), rng.random_range(-100.0..100.0), rng.random_range(-50.0..50.0));
        let (gamma, mu) = (rng.random_range(0.01..=1.0), rng.random_range(0.01..=1.0));
        let got = single(q0, r, next, gamma, mu);
        let want = q0 + gamma * (r + mu * next - q0);
        if (got - want).abs() > 1e-12 * want.abs().max(1.0) {
            return verdict(false, format!("random update: got {got}, want {want}"));
        }
    }

    let mut worst_rate = 0.0f64;
    let mut worst_final = 0.0f64;
    for gamma in [0.9, 0.5, 0.1, 0.05] {
        let (r, next, mu) = (7.0, 3.0, 0.1);
        let fixed = r + mu * next;
        let mut t = QTable::new(TableOwner::Device(DeviceId(0)), 0);
        t.set(key, QEntry { value: -40.0, visits: 0 }).unwrap();
        let mut err = (t.get(&key) - fixed).abs();
        for i in 0..500 {
            let q = t.update(key, r, next, gamma, mu).unwrap();
            let new_err = (q - fixed).abs();
            if err > 1e-6 && i < 20 {
                worst_rate = worst_rate.max((new_err / err - (1.0 - gamma)).abs());
            }
            err = new_err;
        }
        worst_final = worst_final.max(err);
    }
    verdict(
        worst_final <= Q_TOL && worst_rate <= 1e-6,
        format!("worked and 1000 random updates exact; contraction rate error {worst_rate:.1e}, residual after 500 iterations {worst_final:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn base_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Plain softmax-regression minibatch SGD over the whole training set.
fn centralized_epochs(params: &mut [f64], scenario: &Scenario, order_seed: u64) {
    let data = &scenario.data.train;
    let shard = &scenario.partition.assignment[0];
    let (dim, classes) = (data.dim(), data.num_classes());
    let lr = scenario.workload.learning_rate;
    for epoch in 0..scenario.global.local_epochs {
        let order = epoch_order(order_seed, epoch, shard.len());
        for batch in order.chunks(scenario.global.batch_size) {
            let mut grad = vec![0.0; params.len()];
            for &pos in batch {
                let i = shard[pos];
                let x = data.features(i);
                let logits: Vec<f64> = (0..classes)
                    .map(|j| params[dim * classes + j] + (0..dim).map(|f| params[j * dim + f] * x[f]).sum::<f64>())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                for j in 0..classes {
                    let dz = exp[j] / total - if j == data.label(i) as usize { 1.0 } else { 0.0 };
                    for f in 0..dim {
                        grad[j * dim + f] += dz * x[f];
                    }
                    grad[dim * classes + j] += dz;
                }
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr / batch.len() as f64 * g;
            }
        }
    }
}

fn criterion_fedavg_centralized() -> Verdict {
    let mut config = base_config();
    config.fleet.counts = TierCounts::new(0, 0, 1);
    config.global.participants = Some(1);
    let seed = 4;
    let scenario = config.scenario(seed).unwrap();
    if scenario.partition.assignment[0].len() != scenario.data.train.len() {
        return verdict(false, "single device does not hold the whole training set");
    }
    let mut sim = Simulation::new(&scenario, Policy::Random, seed).unwrap();
    let mut central = sim.model().parameters.clone();
    let mut worst = 0.0f64;
    for r in 0..50u64 {
        sim.run_round().unwrap();
        centralized_epochs(&mut central, &scenario, mix(seed, Stream::Training, r, 0));
        let diff = sim
            .model()
            .parameters
            .iter()
            .zip(&central)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff > FEDAVG_TOL {
            return verdict(false, format!("round {r}: max parameter difference {diff:.3e}"));
        }
        worst = worst.max(diff);
    }
    verdict(true, format!("50 rounds, max parameter difference {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn criterion_dirichlet() -> Verdict {
    let spec = SyntheticSpec::default();
    let median_classes = |concentration: f64| {
        let mut counts: Vec<f64> = (0..DIRICHLET_SEEDS)
            .into_par_iter()
            .flat_map_iter(|seed| {
                let data = generate_synthetic(&spec, seed).unwrap();
                let p = partition(&data.train, 20, DataRegime::NonIid(100), concentration, 0.0, seed).unwrap();
                p.class_counts().into_iter().map(|c| c as f64)
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        (median(&mut counts), mean)
    };
    let (low, low_mean) = median_classes(0.1);
    let (high, high_mean) = median_classes(1.0);
    let limit = DIRICHLET_MAX_MEDIAN_SHARE * spec.num_classes as f64;
    verdict(
        low < limit && high > low,
        format!(
            "median (mean) classes per device over {DIRICHLET_SEEDS} seeds: {low} ({low_mean:.2}) at 0.1, limit < {limit}; {high} ({high_mean:.2}) at 1.0"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn run(config: &ExperimentConfig, policy: Policy, seed: u64) -> RunReport {
    let scenario = config.scenario(seed).unwrap();
    Simulation::new(&scenario, policy, seed).unwrap().run(config.max_rounds).unwrap().0
}

fn criterion_non_iid() -> Verdict {
    let rounds = |percent: u8| -> Vec<Option<usize>> {
        let mut config = base_config();
        config.data.non_iid_percent = percent;
        SEEDS.par_iter().map(|&s| run(&config, Policy::Random, s).convergence_round).collect()
    };
    let iid = rounds(0);
    let non_iid = rounds(100);
    if iid.iter().any(Option::is_none) {
        return verdict(false, format!("IID did not converge on every seed: {iid:?}"));
    }
    let mean = |v: &[Option<usize>]| v.iter().map(|r| r.unwrap() as f64).sum::<f64>() / v.len() as f64;
    let iid_mean = mean(&iid);
    if non_iid.iter().any(Option::is_none) {
        return verdict(true, format!("IID rounds {iid:?}; non-IID did not converge on some seed {non_iid:?}"));
    }
    let ratio = mean(&non_iid) / iid_mean;
    verdict(
        ratio >= NON_IID_MIN_RATIO,
        format!("IID rounds {iid:?}, non-IID rounds {non_iid:?}, ratio {ratio:.2} (need >= {NON_IID_MIN_RATIO})"),
    )
}

// ---------------------------------------------------------------- 7

fn bandit_fleet() -> Fleet {
    let spec = FleetSpec::default();
    let devices = (0..4)
        .map(|i| {
            let mut p = tier_profile(&spec, Tier::ALL[i % 3], DeviceId(i as u32));
            let n = p.cpu_steps.len();
            p.cpu_steps.drain(..n - 2);
            let n = p.gpu_steps.len();
            p.gpu_steps.drain(..n - 1);
            p
        })
        .collect();
    Fleet::from_profiles(devices).unwrap()
}

fn criterion_bandit() -> Verdict {
    let fleet = bandit_fleet();
    let best = (DeviceId(2), ExecutionTarget::cpu(0));
    let states = vec![quiet_state(); fleet.len()];
    let noise = Normal::new(0.0, 0.1).unwrap();
    let matches: Vec<(usize, usize)> = (0..BANDIT_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let mut tables = QTables::per_device(&fleet, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (mut hit, mut total) = (0, 0);
            for r in 0..=400u64 {
                if r >= 200 {
                    let greedy = select_round(&tables, &fleet, &states, 1, 0.0, seed, r).unwrap();
                    hit += (greedy.actions.iter().next() == Some((&best.0, &best.1))) as usize;
                    total += 1;
                }
                let plan = select_round(&tables, &fleet, &states, 1, 0.1, seed, r).unwrap();
                let (&d, &a) = plan.actions.iter().next().unwrap();
                let mean = if (d, a) == best { 1.0 } else { 0.0 };
                let reward = mean + noise.sample(&mut rng);
                let (next, _) = tables.best_action(d, states[d.index()], fleet.device(d).actions()).unwrap();
                update_q(&mut tables, d, states[d.index()], a, reward, states[d.index()], next, 0.9, 0.1).unwrap();
            }
            (hit, total)
        })
        .collect();
    let hit: usize = matches.iter().map(|m| m.0).sum();
    let total: usize = matches.iter().map(|m| m.1).sum();
    let worst = matches.iter().map(|m| m.0 as f64 / m.1 as f64).fold(1.0, f64::min);
    let share = hit as f64 / total as f64;
    verdict(
        share >= BANDIT_MIN_MATCH,
        format!("greedy picks the best pair in {:.1}% of rounds 200-400 over {BANDIT_SEEDS} seeds (worst seed {:.1}%)", 100.0 * share, 100.0 * worst),
    )
}

// ---------------------------------------------------------------- 8

struct ToyEnv {
    fleet: Fleet,
    workload: WorkloadSpec,
    global: GlobalParams,
    conditions: Vec<DeviceConditions>,
    shard_sizes: Vec<usize>,
    k: usize,
}

impl ToyEnv {
    fn env(&self) -> RoundEnv<'_> {
        RoundEnv {
            fleet: &self.fleet,
            workload: &self.workload,
            global: &self.global,
            conditions: &self.conditions,
            shard_sizes: &self.shard_sizes,
        }
    }
}

fn random_steps(rng: &mut ChaCha8Rng, idle: f64) -> Vec<FrequencyStep> {
    let n = rng.random_range(1..=3);
    let (mut f, mut p) = (rng.random_range(0.3..1.0), idle + rng.random_range(0.1..1.0));
    (0..n)
        .map(|_| {
            let s = FrequencyStep { frequency: f, busy_power: p };
            f += rng.random_range(0.1..1.0);
            p += rng.random_range(0.0..2.0);
            s
        })
        .collect()
}

fn toy_env(rng: &mut ChaCha8Rng) -> ToyEnv {
    let n = rng.random_range(1..=6);
    let devices = (0..n)
        .map(|i| {
            let tier = Tier::ALL[rng.random_range(0..3)];
            let cpu_idle = rng.random_range(0.05..0.4);
            let gpu_idle = rng.random_range(0.02..0.2);
            let peak = rng.random_range(20.0..160.0);
            DeviceProfile {
                id: DeviceId(i as u32),
                tier,
                peak_throughput: peak,
                gpu_peak_throughput: peak * rng.random_range(0.5..2.5),
                ram_gb: 4.0,
                cpu_steps: random_steps(rng, cpu_idle),
                gpu_steps: random_steps(rng, gpu_idle),
                cpu_idle_power: cpu_idle,
                gpu_idle_power: gpu_idle,
                radio_tx_power: BTreeMap::from([
                    (SignalLevel::Regular, rng.random_range(0.5..1.0)),
                    (SignalLevel::Bad, rng.random_range(1.0..2.0)),
                ]),
            }
        })
        .collect();
    let conditions = (0..n)
        .map(|_| DeviceConditions {
            interference: if rng.random::<bool>() {
                InterferenceState {
                    co_cpu: rng.random_range(0.0..0.8),
                    co_mem: rng.random_range(0.0..0.8),
                }
            } else {
                InterferenceState::NONE
            },
            network: NetworkCondition::new(rng.random_range(5.0..150.0)),
        })
        .collect();
    let k = rng.random_range(1..=n);
    ToyEnv {
        fleet: Fleet::from_profiles(devices).unwrap(),
        workload: WorkloadSpec::preset("cnn-mnist", 16, 10).unwrap(),
        global: GlobalParams {
            participants: k,
            ..GlobalParams::S4
        },
        conditions,
        shard_sizes: (0..n).map(|_| rng.random_range(10..300)).collect(),
        k,
    }
}

/// Minimum fleet energy over every template-conforming subset and every
/// combination of allowed targets.
fn brute_force(toy: &ToyEnv, scope: OracleScope) -> Option<f64> {
    let env = toy.env();
    let n = toy.fleet.len();
    let wanted: BTreeSet<(usize, usize, usize)> = ClusterTemplate::FIXED
        .iter()
        .filter_map(|t| t.scaled(toy.k))
        .map(|c| (c.h, c.m, c.l))
        .collect();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != toy.k {
            continue;
        }
        let ids: Vec<DeviceId> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| DeviceId(i as u32)).collect();
        let h = toy.fleet.histogram(&ids);
        if !wanted.contains(&(h.h, h.m, h.l)) {
            continue;
        }
        let options: Vec<Vec<ExecutionTarget>> = ids
            .iter()
            .map(|&d| {
                let p = toy.fleet.device(d);
                match scope {
                    OracleScope::CpuMax => vec![p.max_target(Processor::Cpu)],
                    OracleScope::AllTargets => p.actions().collect(),
                }
            })
            .collect();
        let mut digits = vec![0usize; ids.len()];
        loop {
            let plan = RoundPlan::new(ids.iter().zip(&digits).enumerate().map(|(i, (&d, &j))| (d, options[i][j])));
            let e = env.plan_energy(&plan).unwrap();
            if best.is_none_or(|b| e < b) {
                best = Some(e);
            }
            let mut pos = 0;
            while pos < digits.len() {
                digits[pos] += 1;
                if digits[pos] < options[pos].len() {
                    break;
                }
                digits[pos] = 0;
                pos += 1;
            }
            if pos == digits.len() {
                break;
            }
        }
    }
    best
}

fn criterion_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut toys = Vec::new();
    let mut skipped = 0;
    while toys.len() < ORACLE_ENVS {
        let toy = toy_env(&mut rng);
        if brute_force(&toy, OracleScope::CpuMax).is_none() {
            skipped += 1;
            continue;
        }
        toys.push(toy);
    }
    let failures: Vec<String> = toys
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, toy)| {
            let mut out = Vec::new();
            for scope in [OracleScope::AllTargets, OracleScope::CpuMax] {
                let (plan, energy) = oracle_plan(&toy.env(), scope, toy.k, 0, i as u64).unwrap();
                let brute = brute_force(toy, scope).unwrap();
                let evaluated = toy.env().plan_energy(&plan).unwrap();
                if rel_err(energy, brute) > ENERGY_REL_TOL || rel_err(evaluated, energy) > ENERGY_REL_TOL || plan.len() != toy.k {
                    out.push(format!("env {i} {scope:?}: oracle {energy}, brute force {brute}"));
                }
            }
            out
        })
        .collect();
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{ORACLE_ENVS} toy fleets ({skipped} infeasible draws redrawn), both oracle scopes equal brute force")
        } else {
            format!("{} mismatches, first: {}", failures.len(), failures[0])
        },
    )
}

// ---------------------------------------------------------------- 9, 10

fn interference_config(shared: bool) -> ExperimentConfig {
    let mut config = base_config();
    config.max_rounds = LONG_RUN_ROUNDS;
    config.global.participants = Some(4);
    config.variance.interference = InterferenceScenario::WebBrowsing;
    config.variance.affected_fraction = 0.3;
    config.engine.stop_at_target = false;
    config.learner.shared_tables = shared;
    config
}

fn criterion_autofl_ppw() -> Verdict {
    let config = interference_config(false);
    let jobs: Vec<(u64, Policy)> = SEEDS
        .iter()
        .flat_map(|&s| [Policy::Random, Policy::OFl, Policy::AutoFl].map(|p| (s, p)))
        .collect();
    let ppw: BTreeMap<(u64, Policy), f64> = jobs
        .par_iter()
        .map(|&(s, p)| ((s, p), run(&config, p, s).ppw_per_round(PPW_SKIP_ROUNDS).unwrap()))
        .collect();
    let mean_norm = |p: Policy| SEEDS.iter().map(|&s| ppw[&(s, p)] / ppw[&(s, Policy::Random)]).sum::<f64>() / SEEDS.len() as f64;
    let autofl = mean_norm(Policy::AutoFl);
    let ofl = mean_norm(Policy::OFl);
    verdict(
        autofl >= AUTOFL_MIN_VS_RANDOM && autofl >= AUTOFL_MIN_VS_OFL * ofl,
        format!(
            "normalized PPW after round {PPW_SKIP_ROUNDS}: AutoFL {autofl:.2}, O_FL {ofl:.2}, AutoFL/O_FL {:.2} (need >= {AUTOFL_MIN_VS_RANDOM} and >= {AUTOFL_MIN_VS_OFL})",
            autofl / ofl
        ),
    )
}

/// Trailing variance of the moving-average reward, indexed by the round
/// that closes each window.
fn trailing_variance(rewards: &[f64]) -> Vec<(usize, f64)> {
    let w = STABILITY_WINDOW;
    let moving: Vec<f64> = rewards.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect();
    moving
        .windows(w)
        .enumerate()
        .map(|(i, x)| {
            let mean = x.iter().sum::<f64>() / w as f64;
            (i + 2 * w - 1, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64)
        })
        .collect()
}

fn criterion_shared_tables() -> Verdict {
    let rounds = |shared: bool| -> Vec<(Option<usize>, f64)> {
        let config = interference_config(shared);
        SEEDS
            .par_iter()
            .map(|&s| {
                let report = run(&config, Policy::AutoFl, s);
                let rewards: Vec<f64> = report.outcomes.iter().map(|o| o.mean_reward()).collect();
                let var = trailing_variance(&rewards);
                let first = var.iter().find(|v| v.1 <= STABILITY_THRESHOLD).map(|v| v.0);
                (first, var.iter().map(|v| v.1).fold(f64::INFINITY, f64::min))
            })
            .collect()
    };
    let per_device = rounds(false);
    let shared = rounds(true);
    let censored = |v: &[(Option<usize>, f64)]| v.iter().map(|r| r.0.unwrap_or(LONG_RUN_ROUNDS) as f64).sum::<f64>() / v.len() as f64;
    let (a, b) = (censored(&per_device), censored(&shared));
    let reduction = 1.0 - b / a;
    let show = |v: &[(Option<usize>, f64)]| {
        v.iter()
            .map(|(r, m)| format!("{} (min var {m:.1})", r.map_or("none".to_string(), |r| r.to_string())))
            .collect::<Vec<_>>()
            .join(", ")
    };
    verdict(
        reduction >= SHARED_MIN_REDUCTION,
        format!(
            "rounds to reward variance <= {STABILITY_THRESHOLD} within {LONG_RUN_ROUNDS}: per-device [{}], shared [{}]; reduction {:.1}% (need >= {:.0}%)",
            show(&per_device),
            show(&shared),
            100.0 * reduction,
            100.0 * SHARED_MIN_REDUCTION
        ),
    )
}

// ---------------------------------------------------------------- 11

fn variance_digest(report: &RunReport) -> Vec<u8> {
    let mut h = Sha256::new();
    for o in &report.outcomes {
        for c in &o.conditions {
            for v in [c.interference.co_cpu, c.interference.co_mem, c.network.bandwidth_mbps] {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update([c.network.signal as u8]);
        }
    }
    h.finalize().to_vec()
}

fn criterion_determinism() -> Verdict {
    let mut config = base_config();
    config.seeds = vec![1, 2];
    config.max_rounds = 15;
    config.policies = vec![Policy::Random, Policy::OFl, Policy::AutoFl];
    config.variance.interference = InterferenceScenario::WebBrowsing;
    config.variance.bandwidth_stddev_mbps = 30.0;
    config.engine.stop_at_target = false;
    config.dump_qtables = true;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outputs: Vec<_> = dirs.iter().map(|d| run_sweep(&config, d.path()).unwrap()).collect();
    let mut compared = 0;
    for file in &outputs[0].files {
        let name = file.file_name().unwrap();
        let a = std::fs::read(file).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        if a != b {
            return verdict(false, format!("{} differs between identical runs", name.to_string_lossy()));
        }
        compared += 1;
    }
    let digests: Vec<Vec<u8>> = outputs[0].reports.iter().filter(|r| r.seed == 1).map(variance_digest).collect();
    let scenario = config.scenario(1).unwrap();
    let mut expected = Sha256::new();
    for r in 0..config.max_rounds as u64 {
        for c in scenario.conditions(1, r) {
            for v in [c.interference.co_cpu, c.interference.co_mem, c.network.bandwidth_mbps] {
                expected.update(v.to_bits().to_le_bytes());
            }
            expected.update([c.network.signal as u8]);
        }
    }
    let expected = expected.finalize().to_vec();
    let fair = digests.len() == 3 && digests.iter().all(|d| *d == expected);
    let hex: String = expected.iter().take(6).map(|b| format!("{b:02x}")).collect();
    verdict(
        fair,
        format!("{compared} files byte-identical across reruns; variance digest {hex}.. shared by {} policies", digests.len()),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_straggler() -> Verdict {
    let mut config = base_config();
    config.fleet.counts = TierCounts::new(0, 0, 3);
    config.global.participants = Some(3);
    let seed = 12;
    let mut scenario = config.scenario(seed).unwrap();
    let mut devices = scenario.fleet.devices().to_vec();
    devices[2].peak_throughput /= 10.0;
    devices[2].gpu_peak_throughput /= 10.0;
    scenario.fleet = Fleet::from_profiles(devices).unwrap();

    let mut sim = Simulation::new(&scenario, Policy::Random, seed).unwrap();
    let before = sim.model().clone();
    let outcome = sim.run_round().unwrap();

    let latency = |d: usize| {
        let p = scenario.fleet.device(DeviceId(d as u32));
        compute_time(
            &scenario.workload,
            p,
            p.max_target(Processor::Cpu),
            &InterferenceState::NONE,
            &scenario.global,
            scenario.partition.assignment[d].len(),
        )
        .unwrap()
            + 2.0 * transfer_time(&scenario.workload, config.variance.bandwidth_mean_mbps)
    };
    let lat: Vec<f64> = (0..3).map(latency).collect();
    let mut sorted = lat.clone();
    let deadline = 3.0 * median(&mut sorted);
    if !(lat[2] > deadline && lat[0] <= deadline && lat[1] <= deadline) {
        return verdict(false, format!("scenario not constructed as intended: latencies {lat:?}"));
    }
    if outcome.plan.len() != 3 || outcome.excluded != vec![DeviceId(2)] {
        return verdict(false, format!("excluded {:?}", outcome.excluded));
    }
    let want_t = lat[0].max(lat[1]);
    if rel_err(outcome.t_round, want_t) > 1e-12 {
        return verdict(false, format!("t_round {} vs {want_t}", outcome.t_round));
    }

    let updates: Vec<(Vec<f64>, usize)> = (0..2)
        .map(|d| {
            let shard = &scenario.partition.assignment[d];
            let u = local_train(
                &before,
                &scenario.data.train,
                shard,
                scenario.global.batch_size,
                scenario.global.local_epochs,
                scenario.workload.learning_rate,
                mix(seed, Stream::Training, 0, d as u64),
            )
            .unwrap();
            (u.parameters, shard.len())
        })
        .collect();
    let n = (updates[0].1 + updates[1].1) as f64;
    let diff = sim
        .model()
        .parameters
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let want = updates[0].0[i] * updates[0].1 as f64 / n + updates[1].0[i] * updates[1].1 as f64 / n;
            (p - want).abs()
        })
        .fold(0.0, f64::max);
    let straggler = &outcome.records[2];
    let charged = straggler.tx_s == 0.0 && rel_err(straggler.busy_total(), want_t) < 1e-12;
    verdict(
        diff < 1e-12 && charged,
        format!(
            "device 2 latency {:.1} s > deadline {deadline:.1} s excluded, t_round {:.2} s, model differs from two-update average by {diff:.1e}",
            lat[2], outcome.t_round
        ),
    )
}

// ----------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "energy equations", criterion_energy),
        (2, "reward exactness", criterion_reward),
        (3, "Q update rule", criterion_q_update),
        (4, "FedAvg equals centralized SGD", criterion_fedavg_centralized),
        (5, "Dirichlet partition statistics", criterion_dirichlet),
        (6, "non-IID convergence degradation", criterion_non_iid),
        (7, "bandit convergence", criterion_bandit),
        (8, "oracle exactness", criterion_oracle),
        (9, "AutoFL PPW win", criterion_autofl_ppw),
        (10, "shared-table speedup", criterion_shared_tables),
        (11, "determinism and fairness", criterion_determinism),
        (12, "straggler semantics", criterion_straggler),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name}: {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var("FEDSIM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
