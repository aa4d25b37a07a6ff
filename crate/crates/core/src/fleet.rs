//! Heterogeneous device fleet: tiers, DVFS tables and cluster templates.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::{keyed_rng, Stream};
use crate::variance::SignalLevel;

/// Device performance category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    H,
    M,
    L,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::H, Tier::M, Tier::L];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tier::H => "H",
            Tier::M => "M",
            Tier::L => "L",
        };
        f.write_str(s)
    }
}

/// On-device processor used for local training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Processor {
    Cpu,
    Gpu,
}

impl fmt::Display for Processor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Processor::Cpu => "CPU",
            Processor::Gpu => "GPU",
        })
    }
}

/// A processor plus one of its voltage/frequency steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExecutionTarget {
    pub processor: Processor,
    pub step: usize,
}

impl ExecutionTarget {
    pub fn cpu(step: usize) -> Self {
        ExecutionTarget { processor: Processor::Cpu, step }
    }

    pub fn gpu(step: usize) -> Self {
        ExecutionTarget { processor: Processor::Gpu, step }
    }
}

impl fmt::Display for ExecutionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.processor, self.step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl DeviceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// One voltage/frequency operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyStep {
    /// GHz.
    pub frequency: f64,
    /// Watts while busy at this frequency.
    pub busy_power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: DeviceId,
    pub tier: Tier,
    /// CPU GFLOP/s at the highest CPU step.
    pub peak_throughput: f64,
    /// GFLOP/s of the GPU at its highest step.
    pub gpu_peak_throughput: f64,
    pub ram_gb: f64,
    pub cpu_steps: Vec<FrequencyStep>,
    pub gpu_steps: Vec<FrequencyStep>,
    pub cpu_idle_power: f64,
    pub gpu_idle_power: f64,
    pub radio_tx_power: BTreeMap<SignalLevel, f64>,
}

impl DeviceProfile {
    pub fn steps(&self, processor: Processor) -> &[FrequencyStep] {
        match processor {
            Processor::Cpu => &self.cpu_steps,
            Processor::Gpu => &self.gpu_steps,
        }
    }

    pub fn step(&self, target: ExecutionTarget) -> Result<&FrequencyStep> {
        let steps = self.steps(target.processor);
        steps.get(target.step).ok_or(SimError::UnknownStep {
            processor: target.processor,
            step: target.step,
            available: steps.len(),
        })
    }

    pub fn idle_power(&self, processor: Processor) -> f64 {
        match processor {
            Processor::Cpu => self.cpu_idle_power,
            Processor::Gpu => self.gpu_idle_power,
        }
    }

    /// Highest-frequency step of `processor`.
    pub fn max_target(&self, processor: Processor) -> ExecutionTarget {
        ExecutionTarget {
            processor,
            step: self.steps(processor).len().saturating_sub(1),
        }
    }

    /// GFLOP/s delivered at `target`, proportional to the step frequency.
    pub fn throughput(&self, target: ExecutionTarget) -> Result<f64> {
        let step = self.step(target)?;
        let steps = self.steps(target.processor);
        let f_max = steps.last().map(|s| s.frequency).unwrap_or(step.frequency);
        let peak = match target.processor {
            Processor::Cpu => self.peak_throughput,
            Processor::Gpu => self.gpu_peak_throughput,
        };
        Ok(peak * step.frequency / f_max)
    }

    pub fn tx_power(&self, signal: SignalLevel) -> Result<f64> {
        self.radio_tx_power
            .get(&signal)
            .copied()
            .ok_or(SimError::UnknownSignal(signal))
    }

    /// Every valid execution target, CPU steps first.
    pub fn actions(&self) -> impl Iterator<Item = ExecutionTarget> + '_ {
        (0..self.cpu_steps.len())
            .map(ExecutionTarget::cpu)
            .chain((0..self.gpu_steps.len()).map(ExecutionTarget::gpu))
    }

    pub fn action_count(&self) -> usize {
        self.cpu_steps.len() + self.gpu_steps.len()
    }

    /// Checks the ordering and positivity invariants of the power tables.
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_throughput > 0.0 && self.gpu_peak_throughput > 0.0) {
            return Err(SimError::precondition(format!("{}: throughput must be positive", self.id)));
        }
        for processor in [Processor::Cpu, Processor::Gpu] {
            let steps = self.steps(processor);
            if steps.is_empty() {
                return Err(SimError::precondition(format!("{}: no {processor} steps", self.id)));
            }
            let idle = self.idle_power(processor);
            for (i, s) in steps.iter().enumerate() {
                if !(s.frequency > 0.0 && s.busy_power > 0.0 && s.busy_power > idle) {
                    return Err(SimError::precondition(format!(
                        "{}: {processor} step {i} must have positive frequency and busy power above idle",
                        self.id
                    )));
                }
                if i > 0 {
                    let prev = steps[i - 1];
                    if s.frequency <= prev.frequency || s.busy_power < prev.busy_power {
                        return Err(SimError::precondition(format!(
                            "{}: {processor} steps must increase in frequency and not decrease in power",
                            self.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-tier values, used for counts and per-tier overrides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierCounts {
    pub h: usize,
    pub m: usize,
    pub l: usize,
}

impl TierCounts {
    pub const fn new(h: usize, m: usize, l: usize) -> Self {
        TierCounts { h, m, l }
    }

    pub fn get(&self, tier: Tier) -> usize {
        match tier {
            Tier::H => self.h,
            Tier::M => self.m,
            Tier::L => self.l,
        }
    }

    pub fn get_mut(&mut self, tier: Tier) -> &mut usize {
        match tier {
            Tier::H => &mut self.h,
            Tier::M => &mut self.m,
            Tier::L => &mut self.l,
        }
    }

    pub fn total(&self) -> usize {
        self.h + self.m + self.l
    }
}

impl fmt::Display for TierCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.h, self.m, self.l)
    }
}

/// Published hardware anchors for one tier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TierHardware {
    pub peak_throughput: f64,
    pub ram_gb: f64,
    pub cpu_max_ghz: f64,
    pub cpu_step_count: usize,
    pub cpu_max_power: f64,
    pub gpu_max_ghz: f64,
    pub gpu_step_count: usize,
    pub gpu_max_power: f64,
}

impl TierHardware {
    /// EC2-equivalent throughput/RAM and the measured phone of each tier
    /// (Mi8Pro, Galaxy S10e, Moto X Force).
    pub const fn for_tier(tier: Tier) -> Self {
        match tier {
            Tier::H => TierHardware {
                peak_throughput: 153.6,
                ram_gb: 8.0,
                cpu_max_ghz: 2.8,
                cpu_step_count: 23,
                cpu_max_power: 5.5,
                gpu_max_ghz: 0.7,
                gpu_step_count: 7,
                gpu_max_power: 2.8,
            },
            Tier::M => TierHardware {
                peak_throughput: 80.0,
                ram_gb: 4.0,
                cpu_max_ghz: 2.7,
                cpu_step_count: 21,
                cpu_max_power: 5.6,
                gpu_max_ghz: 0.7,
                gpu_step_count: 9,
                gpu_max_power: 2.4,
            },
            Tier::L => TierHardware {
                peak_throughput: 52.8,
                ram_gb: 2.0,
                cpu_max_ghz: 1.9,
                cpu_step_count: 15,
                cpu_max_power: 3.6,
                gpu_max_ghz: 0.6,
                gpu_step_count: 6,
                gpu_max_power: 2.0,
            },
        }
    }
}

fn default_gpu_factor() -> [f64; 3] {
    [DEFAULT_GPU_THROUGHPUT_FACTOR; 3]
}

/// GPU peak throughput as a multiple of the tier's CPU peak.
pub const DEFAULT_GPU_THROUGHPUT_FACTOR: f64 = 1.5;

/// Fleet composition and power-model knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSpec {
    pub counts: TierCounts,
    /// CPU idle power as a fraction of CPU max power.
    pub cpu_idle_fraction: f64,
    /// GPU idle power as a fraction of GPU max power.
    pub gpu_idle_fraction: f64,
    pub radio_regular_w: f64,
    pub radio_bad_w: f64,
    /// Per tier (H, M, L).
    #[serde(default = "default_gpu_factor")]
    pub gpu_throughput_factor: [f64; 3],
    /// Lowest DVFS frequency as a fraction of the maximum.
    pub min_frequency_fraction: f64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            counts: TierCounts::DESK,
            cpu_idle_fraction: 0.05,
            gpu_idle_fraction: 0.03,
            radio_regular_w: 0.8,
            radio_bad_w: 1.6,
            gpu_throughput_factor: default_gpu_factor(),
            min_frequency_fraction: 0.3,
        }
    }
}

impl TierCounts {
    /// 30 H, 70 M, 100 L.
    pub const PAPER_SCALE: TierCounts = TierCounts::new(30, 70, 100);
    /// Proportional desk-scale subset.
    pub const DESK: TierCounts = TierCounts::new(3, 7, 10);
}

/// Linearly spaced DVFS table with cubic dynamic power above idle.
fn dvfs_table(max_ghz: f64, count: usize, max_power: f64, idle: f64, min_fraction: f64) -> Vec<FrequencyStep> {
    (0..count)
        .map(|i| {
            let ratio = if count == 1 {
                1.0
            } else {
                min_fraction + (1.0 - min_fraction) * i as f64 / (count - 1) as f64
            };
            FrequencyStep {
                frequency: max_ghz * ratio,
                busy_power: idle + (max_power - idle) * ratio.powi(3),
            }
        })
        .collect()
}

/// Builds the profile a device of `tier` receives under `spec`.
pub fn tier_profile(spec: &FleetSpec, tier: Tier, id: DeviceId) -> DeviceProfile {
    let hw = TierHardware::for_tier(tier);
    let cpu_idle = spec.cpu_idle_fraction * hw.cpu_max_power;
    let gpu_idle = spec.gpu_idle_fraction * hw.gpu_max_power;
    let mut radio = BTreeMap::new();
    radio.insert(SignalLevel::Regular, spec.radio_regular_w);
    radio.insert(SignalLevel::Bad, spec.radio_bad_w);
    DeviceProfile {
        id,
        tier,
        peak_throughput: hw.peak_throughput,
        gpu_peak_throughput: hw.peak_throughput * spec.gpu_throughput_factor[tier.index()],
        ram_gb: hw.ram_gb,
        cpu_steps: dvfs_table(
            hw.cpu_max_ghz,
            hw.cpu_step_count,
            hw.cpu_max_power,
            cpu_idle,
            spec.min_frequency_fraction,
        ),
        gpu_steps: dvfs_table(
            hw.gpu_max_ghz,
            hw.gpu_step_count,
            hw.gpu_max_power,
            gpu_idle,
            spec.min_frequency_fraction,
        ),
        cpu_idle_power: cpu_idle,
        gpu_idle_power: gpu_idle,
        radio_tx_power: radio,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fleet {
    devices: Vec<DeviceProfile>,
    counts: TierCounts,
}

impl Fleet {
    /// Assembles a fleet from explicit profiles; ids must be `0..n` in order.
    pub fn from_profiles(devices: Vec<DeviceProfile>) -> Result<Self> {
        if devices.is_empty() {
            return Err(SimError::EmptyFleet);
        }
        let mut counts = TierCounts::default();
        for (i, d) in devices.iter().enumerate() {
            if d.id.index() != i {
                return Err(SimError::precondition(format!(
                    "device ids must be dense and ordered, found {} at position {i}",
                    d.id
                )));
            }
            d.validate()?;
            *counts.get_mut(d.tier) += 1;
        }
        Ok(Fleet { devices, counts })
    }

    pub fn devices(&self) -> &[DeviceProfile] {
        &self.devices
    }

    pub fn device(&self, id: DeviceId) -> &DeviceProfile {
        &self.devices[id.index()]
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn counts(&self) -> TierCounts {
        self.counts
    }

    pub fn ids(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices.iter().map(|d| d.id)
    }

    pub fn ids_in_tier(&self, tier: Tier) -> Vec<DeviceId> {
        self.devices.iter().filter(|d| d.tier == tier).map(|d| d.id).collect()
    }

    /// Tier histogram of a set of devices.
    pub fn histogram(&self, ids: &[DeviceId]) -> TierCounts {
        let mut counts = TierCounts::default();
        for id in ids {
            *counts.get_mut(self.device(*id).tier) += 1;
        }
        counts
    }
}

/// Builds a fleet of homogeneous tiers. Devices are numbered H first, then M, then L.
///
/// Profiles do not depend on `seed`; it is reserved for per-device jitter.
pub fn build_fleet(spec: &FleetSpec, _seed: u64) -> Result<Fleet> {
    if spec.counts.total() == 0 {
        return Err(SimError::EmptyFleet);
    }
    let mut devices = Vec::with_capacity(spec.counts.total());
    for tier in Tier::ALL {
        for _ in 0..spec.counts.get(tier) {
            let id = DeviceId(devices.len() as u32);
            devices.push(tier_profile(spec, tier, id));
        }
    }
    Fleet::from_profiles(devices)
}

/// Participant mixes used for characterization. `C0` is random selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClusterTemplate {
    C0,
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
}

impl ClusterTemplate {
    pub const ALL: [ClusterTemplate; 8] = [
        ClusterTemplate::C0,
        ClusterTemplate::C1,
        ClusterTemplate::C2,
        ClusterTemplate::C3,
        ClusterTemplate::C4,
        ClusterTemplate::C5,
        ClusterTemplate::C6,
        ClusterTemplate::C7,
    ];

    /// The seven fixed-composition templates.
    pub const FIXED: [ClusterTemplate; 7] = [
        ClusterTemplate::C1,
        ClusterTemplate::C2,
        ClusterTemplate::C3,
        ClusterTemplate::C4,
        ClusterTemplate::C5,
        ClusterTemplate::C6,
        ClusterTemplate::C7,
    ];

    /// Participant counts out of 20, or `None` for random selection.
    pub fn counts(self) -> Option<TierCounts> {
        use ClusterTemplate::*;
        Some(match self {
            C0 => return None,
            C1 => TierCounts::new(20, 0, 0),
            C2 => TierCounts::new(15, 5, 0),
            C3 => TierCounts::new(10, 5, 5),
            C4 => TierCounts::new(5, 10, 5),
            C5 => TierCounts::new(5, 5, 10),
            C6 => TierCounts::new(0, 5, 15),
            C7 => TierCounts::new(0, 0, 20),
        })
    }

    /// Template counts rescaled to sum to `k` by largest-remainder rounding.
    /// Ties in the remainder go to the earlier tier (H before M before L).
    pub fn scaled(self, k: usize) -> Option<TierCounts> {
        self.counts().map(|c| largest_remainder(c, k))
    }
}

impl fmt::Display for ClusterTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub(crate) fn largest_remainder(counts: TierCounts, k: usize) -> TierCounts {
    let total = counts.total();
    if total == 0 {
        return TierCounts::default();
    }
    let mut out = TierCounts::default();
    let mut remainders = Vec::with_capacity(3);
    for tier in Tier::ALL {
        let numerator = counts.get(tier) * k;
        *out.get_mut(tier) = numerator / total;
        remainders.push((numerator % total, tier));
    }
    let mut missing = k - out.total();
    // stable sort keeps H before M before L on equal remainders
    remainders.sort_by_key(|r| std::cmp::Reverse(r.0));
    for (_, tier) in remainders {
        if missing == 0 {
            break;
        }
        *out.get_mut(tier) += 1;
        missing -= 1;
    }
    out
}

/// Draws `k` distinct devices whose tier mix follows `template`.
pub fn instantiate_cluster(
    fleet: &Fleet,
    template: ClusterTemplate,
    k: usize,
    seed: u64,
) -> Result<Vec<DeviceId>> {
    if k > fleet.len() {
        return Err(SimError::precondition(format!(
            "cannot select {k} participants from {} devices",
            fleet.len()
        )));
    }
    let mut rng = keyed_rng(seed, Stream::Cluster, template as u64, k as u64);
    let mut chosen = match template.scaled(k) {
        None => index::sample(&mut rng, fleet.len(), k)
            .into_iter()
            .map(|i| DeviceId(i as u32))
            .collect::<Vec<_>>(),
        Some(want) => {
            let mut chosen = Vec::with_capacity(k);
            for tier in Tier::ALL {
                let pool = fleet.ids_in_tier(tier);
                let needed = want.get(tier);
                if needed > pool.len() {
                    return Err(SimError::InsufficientDevices {
                        tier,
                        needed,
                        available: pool.len(),
                    });
                }
                chosen.extend(index::sample(&mut rng, pool.len(), needed).into_iter().map(|i| pool[i]));
            }
            chosen
        }
    };
    chosen.sort();
    Ok(chosen)
}
