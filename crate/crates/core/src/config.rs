//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{LearnerConfig, Policy};
use crate::data::{generate_synthetic, load_idx, partition, DataRegime, SyntheticSpec, TrainTest};
use crate::engine::{EngineConfig, Scenario};
use crate::error::{Result, SimError};
use crate::fleet::{build_fleet, FleetSpec};
use crate::training::{GlobalParams, WorkloadSpec, WORKLOAD_NAMES};
use crate::variance::VarianceSpec;

/// Global parameters: a named preset with optional overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participants: Option<usize>,
}

impl Default for GlobalSection {
    fn default() -> Self {
        GlobalSection {
            preset: "S4".into(),
            batch_size: None,
            local_epochs: None,
            participants: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Share of devices holding class-skewed data: 0, 50, 75 or 100.
    pub non_iid_percent: u8,
    pub concentration: f64,
    /// Power-law exponent of per-device shard sizes; 0 gives equal shares.
    pub size_skew: f64,
    pub synthetic: SyntheticSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxFiles>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            non_iid_percent: 0,
            concentration: 0.1,
            size_skew: 0.0,
            synthetic: SyntheticSpec::default(),
            idx: None,
        }
    }
}

impl DataSection {
    pub fn regime(&self) -> DataRegime {
        match self.non_iid_percent {
            0 => DataRegime::Iid,
            m => DataRegime::NonIid(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub max_rounds: usize,
    /// Percent.
    pub target_accuracy: f64,
    pub policies: Vec<Policy>,
    pub workload: String,
    pub learning_rate: f64,
    pub output_dir: PathBuf,
    /// Write each AutoFL run's final Q-tables next to its CSV.
    pub dump_qtables: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
    pub fleet: FleetSpec,
    pub global: GlobalSection,
    pub data: DataSection,
    pub variance: VarianceSpec,
    pub learner: LearnerConfig,
    pub engine: EngineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1],
            max_rounds: 300,
            target_accuracy: 90.0,
            policies: vec![Policy::Random, Policy::AutoFl],
            workload: "cnn-mnist".into(),
            learning_rate: 0.05,
            output_dir: PathBuf::from("fedsim-out"),
            dump_qtables: false,
            warm_start: None,
            fleet: FleetSpec::default(),
            global: GlobalSection::default(),
            data: DataSection::default(),
            variance: VarianceSpec::default(),
            learner: LearnerConfig::default(),
            engine: EngineConfig::default(),
        }
    }
}

/// Parses and validates a config document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| SimError::config("<document>", e.to_string()))?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        SimError::config(path, e.into_inner().message().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    parse_config_str(&text)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn global_params(&self) -> Result<GlobalParams> {
        let mut g = GlobalParams::named(&self.global.preset).ok_or_else(|| {
            SimError::config("global.preset", format!("unknown preset `{}` (expected S1-S4)", self.global.preset))
        })?;
        if let Some(b) = self.global.batch_size {
            g.batch_size = b;
        }
        if let Some(e) = self.global.local_epochs {
            g.local_epochs = e;
        }
        if let Some(k) = self.global.participants {
            g.participants = k;
        }
        g.max_rounds = self.max_rounds;
        g.target_accuracy = self.target_accuracy;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(SimError::config("seeds", "at least one seed is required"));
        }
        if self.policies.is_empty() {
            return Err(SimError::config("policies", "at least one policy is required"));
        }
        if !WORKLOAD_NAMES.contains(&self.workload.as_str()) {
            return Err(SimError::config(
                "workload",
                format!("unknown workload `{}` (expected one of {})", self.workload, WORKLOAD_NAMES.join(", ")),
            ));
        }
        if self.workload == "lstm-shakespeare" {
            return Err(SimError::config("workload", "`lstm-shakespeare` is descriptor-only and cannot be trained"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SimError::config("learning_rate", "must be positive"));
        }
        if self.fleet.counts.total() == 0 {
            return Err(SimError::EmptyFleet);
        }
        if ![0, 50, 75, 100].contains(&self.data.non_iid_percent) {
            return Err(SimError::config("data.non_iid_percent", "must be 0, 50, 75 or 100"));
        }
        if !(self.data.concentration > 0.0) {
            return Err(SimError::config("data.concentration", "must be positive"));
        }
        if !(self.data.size_skew >= 0.0) {
            return Err(SimError::config("data.size_skew", "must be non-negative"));
        }
        let s = &self.data.synthetic;
        if s.num_classes == 0 || s.samples_per_class == 0 || s.test_samples_per_class == 0 || s.feature_dim == 0 {
            return Err(SimError::config("data.synthetic", "all counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.variance.affected_fraction) {
            return Err(SimError::config("variance.affected_fraction", "must be in [0, 1]"));
        }
        if !(self.variance.bandwidth_mean_mbps > 0.0) {
            return Err(SimError::config("variance.bandwidth_mean_mbps", "must be positive"));
        }
        if !(self.variance.bandwidth_stddev_mbps >= 0.0) {
            return Err(SimError::config("variance.bandwidth_stddev_mbps", "must be non-negative"));
        }
        if !(self.engine.straggler_multiplier >= 1.0) {
            return Err(SimError::config("engine.straggler_multiplier", "must be at least 1"));
        }
        self.learner.validate()?;
        self.global_params()?.validate(self.fleet.counts.total())?;
        Ok(())
    }

    fn dataset(&self, seed: u64) -> Result<TrainTest> {
        match &self.data.idx {
            None => generate_synthetic(&self.data.synthetic, seed),
            Some(f) => Ok(TrainTest {
                train: load_idx(&f.train_images, &f.train_labels)?,
                test: load_idx(&f.test_images, &f.test_labels)?,
            }),
        }
    }

    /// Builds the fleet, dataset and partition of one seed.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        self.validate()?;
        let fleet = build_fleet(&self.fleet, seed)?;
        let data = self.dataset(seed)?;
        let mut workload = WorkloadSpec::preset(&self.workload, data.train.dim(), data.train.num_classes())
            .expect("validated workload name");
        workload.learning_rate = self.learning_rate;
        let partition = partition(
            &data.train,
            fleet.len(),
            self.data.regime(),
            self.data.concentration,
            self.data.size_skew,
            seed,
        )?;
        let scenario = Scenario {
            fleet,
            workload,
            global: self.global_params()?,
            data,
            partition,
            variance: self.variance.clone(),
            learner: self.learner.clone(),
            engine: self.engine.clone(),
        };
        scenario.validate()?;
        Ok(scenario)
    }
}
