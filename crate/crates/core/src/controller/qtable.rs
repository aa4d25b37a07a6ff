//! Sparse lookup tables for `Q(S_global, S_local, A)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Result, SimError};
use crate::fleet::{DeviceId, ExecutionTarget, Fleet, Processor, Tier};
use crate::rng::{mix, unit_interval, Stream};
use crate::state::{GlobalState, LocalState, StateVector};

/// Upper bound of the lazy initial value.
pub const INIT_SCALE: f64 = 0.01;

pub const QTABLE_CSV_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QKey {
    pub global: GlobalState,
    pub local: LocalState,
    pub action: ExecutionTarget,
}

impl QKey {
    pub fn new(state: StateVector, action: ExecutionTarget) -> Self {
        QKey {
            global: state.global,
            local: state.local,
            action,
        }
    }

    fn packed(&self) -> u64 {
        let mut word = 0u64;
        for b in self.global.as_array().into_iter().chain(self.local.as_array()) {
            word = (word << 4) | b as u64;
        }
        word = (word << 1) | (self.action.processor == Processor::Gpu) as u64;
        (word << 16) | self.action.step as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QEntry {
    pub value: f64,
    pub visits: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TableOwner {
    Device(DeviceId),
    Tier(Tier),
}

impl TableOwner {
    fn code(self) -> u64 {
        match self {
            TableOwner::Device(d) => d.0 as u64,
            TableOwner::Tier(t) => (1 << 32) | t.index() as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub owner: TableOwner,
    seed: u64,
    entries: BTreeMap<QKey, QEntry>,
}

impl QTable {
    pub fn new(owner: TableOwner, seed: u64) -> Self {
        QTable {
            owner,
            seed,
            entries: BTreeMap::new(),
        }
    }

    /// Value an absent entry reads as, uniform in `[0, INIT_SCALE)`.
    pub fn initial_value(&self, key: &QKey) -> f64 {
        INIT_SCALE * unit_interval(mix(self.seed, Stream::QInit, self.owner.code(), key.packed()))
    }

    pub fn get(&self, key: &QKey) -> f64 {
        self.entries.get(key).map_or_else(|| self.initial_value(key), |e| e.value)
    }

    pub fn entry(&self, key: &QKey) -> Option<&QEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&QKey, &QEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set(&mut self, key: QKey, entry: QEntry) -> Result<()> {
        if !entry.value.is_finite() {
            return Err(SimError::precondition("q-values must be finite"));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    /// `Q <- Q + gamma * (reward + mu * next - Q)`; returns the new value.
    pub fn update(&mut self, key: QKey, reward: f64, next: f64, gamma: f64, mu: f64) -> Result<f64> {
        let q = self.get(&key);
        let value = q + gamma * (reward + mu * next - q);
        let visits = self.entries.get(&key).map_or(0, |e| e.visits) + 1;
        self.set(key, QEntry { value, visits })?;
        Ok(value)
    }
}

/// The tables of a whole fleet plus the device-to-table mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct QTables {
    tables: Vec<QTable>,
    table_of: Vec<usize>,
}

impl QTables {
    /// One table per device.
    pub fn per_device(fleet: &Fleet, seed: u64) -> Self {
        QTables {
            tables: fleet.ids().map(|d| QTable::new(TableOwner::Device(d), seed)).collect(),
            table_of: (0..fleet.len()).collect(),
        }
    }

    /// One table per tier shared by all its devices.
    pub fn shared(fleet: &Fleet, seed: u64) -> Self {
        QTables {
            tables: Tier::ALL.iter().map(|&t| QTable::new(TableOwner::Tier(t), seed)).collect(),
            table_of: fleet.devices().iter().map(|d| d.tier.index()).collect(),
        }
    }

    pub fn is_shared(&self) -> bool {
        self.tables.iter().any(|t| matches!(t.owner, TableOwner::Tier(_)))
    }

    pub fn tables(&self) -> &[QTable] {
        &self.tables
    }

    pub fn table(&self, device: DeviceId) -> &QTable {
        &self.tables[self.table_of[device.index()]]
    }

    pub fn table_mut(&mut self, device: DeviceId) -> &mut QTable {
        &mut self.tables[self.table_of[device.index()]]
    }

    pub fn value(&self, device: DeviceId, state: StateVector, action: ExecutionTarget) -> f64 {
        self.table(device).get(&QKey::new(state, action))
    }

    /// Highest-valued action, the first one in `actions` order on ties.
    pub fn best_action(
        &self,
        device: DeviceId,
        state: StateVector,
        actions: impl IntoIterator<Item = ExecutionTarget>,
    ) -> Option<(ExecutionTarget, f64)> {
        let table = self.table(device);
        let mut best: Option<(ExecutionTarget, f64)> = None;
        for a in actions {
            let q = table.get(&QKey::new(state, a));
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((a, q));
            }
        }
        best
    }

    pub fn visited_entries(&self) -> usize {
        self.tables.iter().map(QTable::len).sum()
    }

    /// Writes a versioned CSV dump of every stored entry.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut text = format!("# fedsim q-table v{QTABLE_CSV_VERSION}\nowner,global,local,processor,step,value,visits\n");
        for table in &self.tables {
            let owner = match table.owner {
                TableOwner::Device(d) => d.0.to_string(),
                TableOwner::Tier(t) => t.to_string(),
            };
            for (k, e) in table.entries() {
                let _ = writeln!(
                    text,
                    "{owner},{},{},{},{},{:e},{}",
                    k.global, k.local, k.action.processor, k.action.step, e.value, e.visits
                );
            }
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Loads entries from a dump into these tables; owners must match the layout.
    pub fn read_csv(&mut self, input: impl BufRead) -> Result<()> {
        let format = |line: usize, message: String| SimError::Format {
            path: format!("q-table line {line}").into(),
            message,
        };
        let mut lines = input.lines().enumerate();
        match lines.next() {
            Some((_, Ok(h))) if h == format!("# fedsim q-table v{QTABLE_CSV_VERSION}") => {}
            _ => return Err(format(1, "missing or unsupported version header".into())),
        }
        lines.next();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(format(i + 1, format!("expected 7 fields, found {}", fields.len())));
            }
            let owner = match fields[0] {
                "H" => TableOwner::Tier(Tier::H),
                "M" => TableOwner::Tier(Tier::M),
                "L" => TableOwner::Tier(Tier::L),
                d => TableOwner::Device(DeviceId(d.parse().map_err(|_| format(i + 1, format!("bad owner `{d}`")))?)),
            };
            let digits = |s: &str, n: usize| -> Result<Vec<u8>> {
                let v: Vec<u8> = s.bytes().map(|b| b.wrapping_sub(b'0')).collect();
                if v.len() != n || v.iter().any(|&d| d > 9) {
                    return Err(format(i + 1, format!("bad state `{s}`")));
                }
                Ok(v)
            };
            let g = digits(fields[1], 6)?;
            let l = digits(fields[2], 4)?;
            let processor = match fields[3] {
                "CPU" => Processor::Cpu,
                "GPU" => Processor::Gpu,
                p => return Err(format(i + 1, format!("bad processor `{p}`"))),
            };
            let parse_err = |what: &str| format(i + 1, format!("bad {what}"));
            let key = QKey {
                global: GlobalState {
                    conv: g[0],
                    fc: g[1],
                    rc: g[2],
                    batch: g[3],
                    epochs: g[4],
                    participants: g[5],
                },
                local: LocalState {
                    co_cpu: l[0],
                    co_mem: l[1],
                    network: l[2],
                    data: l[3],
                },
                action: ExecutionTarget {
                    processor,
                    step: fields[4].parse().map_err(|_| parse_err("step"))?,
                },
            };
            let entry = QEntry {
                value: fields[5].parse().map_err(|_| parse_err("value"))?,
                visits: fields[6].parse().map_err(|_| parse_err("visits"))?,
            };
            let table = self
                .tables
                .iter_mut()
                .find(|t| t.owner == owner)
                .ok_or_else(|| format(i + 1, format!("no table for owner `{}`", fields[0])))?;
            table.set(key, entry)?;
        }
        Ok(())
    }
}

/// Merges per-device tables into one table per tier. Entries present in
/// several device tables are combined by visit-weighted mean.
pub fn share_tables(tables: &QTables, fleet: &Fleet, seed: u64) -> Result<QTables> {
    if tables.is_shared() {
        return Ok(tables.clone());
    }
    let mut shared = QTables::shared(fleet, seed);
    for tier in Tier::ALL {
        let mut sums: BTreeMap<QKey, (f64, u64)> = BTreeMap::new();
        for d in fleet.ids_in_tier(tier) {
            for (k, e) in tables.table(d).entries() {
                let s = sums.entry(*k).or_insert((0.0, 0));
                s.0 += e.value * e.visits as f64;
                s.1 += e.visits;
            }
        }
        let table = &mut shared.tables[tier.index()];
        for (k, (sum, visits)) in sums {
            let value = if visits == 0 { 0.0 } else { sum / visits as f64 };
            table.set(k, QEntry { value, visits })?;
        }
    }
    Ok(shared)
}
