//! Training configuration: a TOML file that fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::optim::DEFAULT_MOMENTUM;
use crate::util::sha256_hex;

/// Training phases, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "ga")]
    Ga,
    #[serde(rename = "ga-ca")]
    GaCa,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Source, Phase::Ga, Phase::GaCa];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Source => "source",
            Phase::Ga => "ga",
            Phase::GaCa => "ga-ca",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn uses_target(self) -> bool {
        self != Phase::Source
    }

    pub fn uses_constraints(self) -> bool {
        self == Phase::GaCa
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Phase::Source),
            "ga" => Ok(Phase::Ga),
            "ga-ca" => Ok(Phase::GaCa),
            other => Err(Error::Argument(format!(
                "unknown phase {other:?} (expected source, ga or ga-ca)"
            ))),
        }
    }
}

/// Per-phase optimisation settings. `lr` drives the segmentation network,
/// `lr_domain` the domain classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_domain")]
    pub lr_domain: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "one")]
    pub k_d: usize,
    #[serde(default = "one")]
    pub k_r: usize,
    #[serde(default = "default_lambda_da")]
    pub lambda_da: f64,
    #[serde(default = "default_lambda_mi")]
    pub lambda_mi: f64,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    0.05
}
fn default_lr_domain() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn one() -> usize {
    1
}
fn default_lambda_da() -> f64 {
    1.0
}
fn default_lambda_mi() -> f64 {
    0.1
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            batch_size: default_batch(),
            lr: default_lr(),
            lr_domain: default_lr_domain(),
            momentum: default_momentum(),
            k_d: 1,
            k_r: 1,
            lambda_da: default_lambda_da(),
            lambda_mi: default_lambda_mi(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phases {
    #[serde(default)]
    pub source: PhaseConfig,
    #[serde(default)]
    pub ga: PhaseConfig,
    #[serde(default, rename = "ga-ca")]
    pub ga_ca: PhaseConfig,
}

impl Phases {
    pub fn get(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::Source => &self.source,
            Phase::Ga => &self.ga,
            Phase::GaCa => &self.ga_ca,
        }
    }

    pub fn get_mut(&mut self, phase: Phase) -> &mut PhaseConfig {
        match phase {
            Phase::Source => &mut self.source,
            Phase::Ga => &mut self.ga,
            Phase::GaCa => &mut self.ga_ca,
        }
    }
}

/// Dataset and output locations, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: Option<String>,
    pub source_val: Option<String>,
    pub target: Option<String>,
    pub target_test: Option<String>,
    pub stats: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Images per domain held out from training for classifier accuracy
    /// diagnostics.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
}

fn default_hidden() -> usize {
    64
}
fn default_holdout() -> usize {
    8
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            holdout: default_holdout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Write a checkpoint every this many epochs (and always at phase end).
    #[serde(default = "one")]
    pub every_epochs: usize,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self { every_epochs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Directory receiving checkpoints and logs.
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub phases: Phases,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
}

fn default_output() -> String {
    "run".into()
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            output: default_output(),
            arch: ArchConfig::default(),
            domain: DomainConfig::default(),
            data: DataPaths::default(),
            phases: Phases::default(),
            checkpoint: CheckpointConfig::default(),
        }
    }

    /// Settings for the synthetic benchmark produced by `gen-data --out data`.
    /// The alignment loss is summed over units, so its weight and the
    /// classifier rate sit far below the generic defaults.
    pub fn benchmark(seed: u64) -> Self {
        let adapt = PhaseConfig {
            k_d: 16,
            lambda_da: 3e-4,
            lr_domain: 1e-4,
            ..PhaseConfig::default()
        };
        Self {
            data: DataPaths {
                source: Some("data/source/manifest.json".into()),
                source_val: Some("data/source_val/manifest.json".into()),
                target: Some("data/target/manifest.json".into()),
                target_test: Some("data/target_test/manifest.json".into()),
                stats: Some("data/stats.json".into()),
            },
            phases: Phases {
                source: PhaseConfig {
                    epochs: 20,
                    lr: 0.1,
                    ..PhaseConfig::default()
                },
                ga: PhaseConfig {
                    epochs: 30,
                    lr: 0.01,
                    ..adapt.clone()
                },
                ga_ca: PhaseConfig {
                    epochs: 10,
                    lr: 0.005,
                    lambda_mi: 0.3,
                    ..adapt
                },
            },
            ..Self::new(seed)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::parse("training config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.domain.hidden == 0 {
            return Err(Error::Config("domain classifier needs a hidden width".into()));
        }
        if self.checkpoint.every_epochs == 0 {
            return Err(Error::Config("checkpoint.every_epochs must be at least 1".into()));
        }
        for phase in Phase::ALL {
            let p = self.phases.get(phase);
            let name = phase.name();
            if p.batch_size == 0 {
                return Err(Error::Config(format!("phases.{name}.batch_size must be at least 1")));
            }
            for (key, v) in [
                ("lr", p.lr),
                ("lr_domain", p.lr_domain),
                ("momentum", p.momentum),
                ("lambda_da", p.lambda_da),
                ("lambda_mi", p.lambda_mi),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Config(format!("phases.{name}.{key} must be finite and >= 0")));
                }
            }
            if p.momentum >= 1.0 {
                return Err(Error::Config(format!("phases.{name}.momentum must be below 1")));
            }
            if phase.uses_target() && p.epochs > 0 && (p.k_d == 0 || p.k_r == 0) {
                return Err(Error::Config(format!("phases.{name}: k_d and k_r must be at least 1")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding of the whole config.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = TrainConfig::from_toml("seed = 3\n").unwrap();
        assert_eq!(cfg.phases.ga.lambda_da, 1.0);
        assert_eq!(cfg.phases.ga_ca.lambda_mi, 0.1);
        assert_eq!(cfg.phases.source.momentum, 0.9);
        assert_eq!(cfg.domain.hidden, 64);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let mut cfg = TrainConfig::new(11);
        cfg.phases.source.epochs = 4;
        cfg.phases.ga_ca.lambda_mi = 0.25;
        cfg.data.source = Some("data/source/manifest.json".into());
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn rejects_negative_weight_and_unknown_key() {
        assert!(TrainConfig::from_toml("seed = 1\n[phases.ga]\nlambda_da = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("seed = 1\nsede = 2\n").is_err());
        assert!(TrainConfig::from_toml("[phases.ga]\nepochs = 1\n").is_err());
    }

    #[test]
    fn shipped_benchmark_file_matches_constructor() {
        let file = TrainConfig::from_toml(include_str!("../../../configs/benchmark.toml")).unwrap();
        assert_eq!(file, TrainConfig::benchmark(0));
    }

    #[test]
    fn phase_names_parse() {
        for p in Phase::ALL {
            assert_eq!(p.name().parse::<Phase>().unwrap(), p);
        }
        assert!("ga_ca".parse::<Phase>().is_err());
    }
}
