//! Experiment configuration, stored as TOML.
//!
//! ```toml
//! version = 1
//! method = "fedpruning"
//! seeds = [1, 2, 3]
//!
//! [data]
//! source = "synthetic"
//! num_silos = 9
//! ```
//!
//! Omitted `rounds` and `epochs` fall back to per-method defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, SyntheticConfig};
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, OptimizerConfig};
use crate::schedule::{PruneSchedule, ScheduleVariant, DEFAULT_ROUNDS};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One model on the pooled data.
    Centralized,
    /// Each silo trains alone.
    LocalOnly,
    Fedavg,
    Fedpruning,
    FedpruningLt,
    OneShot,
    OneShotLt,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Centralized,
        Method::LocalOnly,
        Method::Fedavg,
        Method::Fedpruning,
        Method::FedpruningLt,
        Method::OneShot,
        Method::OneShotLt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Centralized => "centralized",
            Method::LocalOnly => "local_only",
            Method::Fedavg => "fedavg",
            Method::Fedpruning => "fedpruning",
            Method::FedpruningLt => "fedpruning_lt",
            Method::OneShot => "one_shot",
            Method::OneShotLt => "one_shot_lt",
        }
    }

    pub fn variant(self) -> ScheduleVariant {
        match self {
            Method::Fedpruning => ScheduleVariant::Iterative,
            Method::FedpruningLt => ScheduleVariant::IterativeLt,
            Method::OneShot => ScheduleVariant::OneShot,
            Method::OneShotLt => ScheduleVariant::OneShotLt,
            _ => ScheduleVariant::None,
        }
    }

    pub fn is_federated(self) -> bool {
        !matches!(self, Method::Centralized | Method::LocalOnly)
    }

    pub fn prunes(self) -> bool {
        self.variant() != ScheduleVariant::None
    }

    pub fn default_rounds(self) -> usize {
        if self.is_federated() {
            DEFAULT_ROUNDS
        } else {
            1
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Method::Centralized | Method::LocalOnly => 300,
            Method::Fedavg | Method::OneShot | Method::OneShotLt => 5,
            Method::Fedpruning => 6,
            Method::FedpruningLt => 8,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-field overrides of the method's built-in pruning schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_freeze: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_recovery_rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lth_reset: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synchronized: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_tolerance: Option<f64>,
}

impl ScheduleOverrides {
    pub fn apply(&self, mut s: PruneSchedule) -> PruneSchedule {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { s.$f = v; })* };
        }
        set!(
            rate,
            target_sparsity,
            warmup_rounds,
            final_freeze,
            min_recovery_rounds,
            recovery_factor,
            lth_reset,
            synchronized,
            target_tolerance
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv { path: PathBuf, schema: CsvSchema },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Epochs of retraining right after a prune; defaults to `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery_epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Early-stopping patience within one local training call; 0 disables it.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Oversample every silo's training rows up to the largest silo.
    #[serde(default = "default_true")]
    pub oversample: bool,
    /// Weight federated averaging by training-set size instead of equally.
    #[serde(default)]
    pub weighted_average: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataSource,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_batch_size() -> usize {
    128
}
fn default_patience() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        Self {
            version: CONFIG_VERSION,
            method,
            rounds: None,
            epochs: None,
            recovery_epochs: None,
            batch_size: default_batch_size(),
            patience: default_patience(),
            oversample: true,
            weighted_average: false,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleOverrides::default(),
            model: ModelConfig::default(),
            data: DataSource::default(),
        }
    }

    pub fn rounds(&self) -> usize {
        self.rounds.unwrap_or_else(|| self.method.default_rounds())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.method.default_epochs())
    }

    pub fn recovery_epochs(&self) -> usize {
        self.recovery_epochs.unwrap_or_else(|| self.epochs())
    }

    pub fn patience(&self) -> Option<usize> {
        (self.patience > 0).then_some(self.patience)
    }

    pub fn prune_schedule(&self) -> PruneSchedule {
        self.schedule.apply(PruneSchedule::for_variant(self.method.variant()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.rounds() == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.epochs() == 0 || self.recovery_epochs() == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.optimizer.validate()?;
        self.prune_schedule().validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_method_defaults() {
        let cfg = ExperimentConfig::from_toml("method = \"fedpruning_lt\"\n").unwrap();
        assert_eq!(cfg.rounds(), 40);
        assert_eq!(cfg.epochs(), 8);
        assert_eq!(cfg.recovery_epochs(), 8);
        assert!(cfg.prune_schedule().lth_reset);
        let c = ExperimentConfig::from_toml("method = \"centralized\"\n").unwrap();
        assert_eq!((c.rounds(), c.epochs()), (1, 300));
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::new(Method::OneShot);
        cfg.rounds = Some(12);
        cfg.schedule.rate = Some(0.5);
        cfg.seeds = vec![4, 5];
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn csv_source_round_trips() {
        let mut cfg = ExperimentConfig::new(Method::Fedavg);
        cfg.data = DataSource::Csv {
            path: "data/silos".into(),
            schema: CsvSchema::new(crate::data::default_groups()),
        };
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "method = \"fedsgd\"\n",
            "method = \"fedavg\"\nrounds = 0\n",
            "method = \"fedavg\"\nseeds = []\n",
            "method = \"fedavg\"\nversion = 7\n",
            "method = \"fedavg\"\nunknown = 1\n",
            "method = \"fedpruning\"\n[schedule]\nrate = 1.5\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides_replace_only_given_fields() {
        let o = ScheduleOverrides { rate: Some(0.1), ..Default::default() };
        let s = o.apply(PruneSchedule::for_variant(ScheduleVariant::Iterative));
        assert_eq!(s.rate, 0.1);
        assert_eq!(s.target_sparsity, 0.80);
    }
}
