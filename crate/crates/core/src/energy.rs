//! Energy and timing models.
//!
//! Compute energy sums busy power over the frequency steps visited plus idle
//! power for the rest of the round. Communication energy is radio transmit
//! power at the current signal level times transmit time. Devices that sit out
//! a round draw CPU idle power for the whole round.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fleet::{DeviceId, DeviceProfile, ExecutionTarget, Processor};
use crate::training::{GlobalParams, WorkloadSpec};
use crate::variance::{InterferenceState, SignalLevel};

/// Slowdown never exceeds this fraction of throughput.
pub const MAX_SLOWDOWN: f64 = 0.9;
/// Extra slowdown when co-running memory usage is above [`MEMORY_PRESSURE_LEVEL`].
pub const MEMORY_PRESSURE_SLOWDOWN: f64 = 0.1;
pub const MEMORY_PRESSURE_LEVEL: f64 = 0.75;
/// Fraction of the CPU slowdown a GPU target suffers.
pub const GPU_INTERFERENCE_SHARE: f64 = 0.25;
/// Fixed connection setup per transfer, seconds.
pub const TX_SETUP_LATENCY: f64 = 0.05;
pub const BYTES_PER_PARAMETER: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub device: DeviceId,
    /// `None` for devices that sat out the round.
    pub target: Option<ExecutionTarget>,
    /// Seconds spent busy at each step of `target`'s processor.
    pub busy: BTreeMap<usize, f64>,
    pub idle_s: f64,
    pub tx_s: f64,
    pub signal: SignalLevel,
    pub round_s: f64,
}

impl ExecutionRecord {
    /// A participant that computed for `compute_s`, transmitted for `tx_s` and
    /// idled on its target processor until the round ended.
    pub fn participant(
        device: DeviceId,
        target: ExecutionTarget,
        compute_s: f64,
        tx_s: f64,
        signal: SignalLevel,
        round_s: f64,
    ) -> Self {
        let mut busy = BTreeMap::new();
        busy.insert(target.step, compute_s);
        ExecutionRecord {
            device,
            target: Some(target),
            busy,
            idle_s: (round_s - compute_s - tx_s).max(0.0),
            tx_s,
            signal,
            round_s,
        }
    }

    pub fn idle(device: DeviceId, signal: SignalLevel, round_s: f64) -> Self {
        ExecutionRecord {
            device,
            target: None,
            busy: BTreeMap::new(),
            idle_s: round_s,
            tx_s: 0.0,
            signal,
            round_s,
        }
    }

    pub fn busy_total(&self) -> f64 {
        self.busy.values().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_comp: f64,
    pub e_comm: f64,
    pub e_idle: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(e_comp: f64, e_comm: f64, e_idle: f64) -> Self {
        EnergyBreakdown {
            e_comp,
            e_comm,
            e_idle,
            total: e_comp + e_comm + e_idle,
        }
    }
}

fn processor_energy(profile: &DeviceProfile, record: &ExecutionRecord, expected: Processor) -> Result<f64> {
    let processor = record.target.map(|t| t.processor).unwrap_or(expected);
    if processor != expected {
        return Err(SimError::WrongTarget { expected, actual: processor });
    }
    let mut joules = 0.0;
    for (&step, &seconds) in &record.busy {
        let power = profile.step(ExecutionTarget { processor, step })?.busy_power;
        joules += power * seconds;
    }
    Ok(joules + profile.idle_power(processor) * record.idle_s)
}

pub fn compute_energy_cpu(profile: &DeviceProfile, record: &ExecutionRecord) -> Result<f64> {
    processor_energy(profile, record, Processor::Cpu)
}

pub fn compute_energy_gpu(profile: &DeviceProfile, record: &ExecutionRecord) -> Result<f64> {
    processor_energy(profile, record, Processor::Gpu)
}

pub fn compute_energy_comm(profile: &DeviceProfile, record: &ExecutionRecord) -> Result<f64> {
    if record.tx_s < 0.0 {
        return Err(SimError::precondition("negative transmit time"));
    }
    Ok(profile.tx_power(record.signal)? * record.tx_s)
}

pub fn compute_energy_idle(profile: &DeviceProfile, t_round: f64) -> f64 {
    profile.cpu_idle_power * t_round
}

/// Energy of one device for one round.
pub fn breakdown(profile: &DeviceProfile, record: &ExecutionRecord) -> Result<EnergyBreakdown> {
    match record.target {
        None => Ok(EnergyBreakdown::new(0.0, 0.0, compute_energy_idle(profile, record.round_s))),
        Some(target) => {
            let comp = match target.processor {
                Processor::Cpu => compute_energy_cpu(profile, record)?,
                Processor::Gpu => compute_energy_gpu(profile, record)?,
            };
            Ok(EnergyBreakdown::new(comp, compute_energy_comm(profile, record)?, 0.0))
        }
    }
}

/// Fractional throughput loss caused by co-running applications.
pub fn slowdown(interference: &InterferenceState, processor: Processor) -> f64 {
    let mut cpu = interference.co_cpu.clamp(0.0, 1.0).min(MAX_SLOWDOWN);
    if interference.co_mem > MEMORY_PRESSURE_LEVEL {
        cpu += MEMORY_PRESSURE_SLOWDOWN;
    }
    let cpu = cpu.min(MAX_SLOWDOWN);
    match processor {
        Processor::Cpu => cpu,
        Processor::Gpu => GPU_INTERFERENCE_SHARE * cpu,
    }
}

/// Seconds of local training for `samples` over the configured epochs.
pub fn compute_time(
    workload: &WorkloadSpec,
    profile: &DeviceProfile,
    target: ExecutionTarget,
    interference: &InterferenceState,
    global: &GlobalParams,
    samples: usize,
) -> Result<f64> {
    if samples == 0 {
        return Err(SimError::precondition("compute_time needs at least one sample"));
    }
    let throughput = profile.throughput(target)? * 1e9 * (1.0 - slowdown(interference, target.processor));
    if throughput <= 0.0 {
        return Err(SimError::ZeroThroughput);
    }
    let flops = workload.flops_per_sample * samples as f64 * global.local_epochs as f64;
    Ok(flops / throughput)
}

/// One-way transfer time of the model at `bandwidth_mbps`.
pub fn transfer_time(workload: &WorkloadSpec, bandwidth_mbps: f64) -> f64 {
    let bytes = workload.parameter_count as f64 * BYTES_PER_PARAMETER;
    bytes * 8.0 / (bandwidth_mbps * 1e6) + TX_SETUP_LATENCY
}

/// Progress per joule.
pub fn ppw(progress: f64, total_energy: f64) -> Result<f64> {
    if !(total_energy > 0.0) {
        return Err(SimError::ZeroEnergy);
    }
    Ok(progress / total_energy)
}
