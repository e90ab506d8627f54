//! Versioned experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{DatasetId, SyntheticSpec};
use crate::deployment::DeviceSettings;
use crate::error::{Error, Result};
use crate::hwmodel::HardwareConfig;
use crate::learner::{AdaptConfig, PretrainConfig};
use crate::noise_gpr::SynthParams;
use crate::snn::{LifParams, NetworkSpec};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Where device noise comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// When false, devices are programmed at their ideal levels.
    pub enabled: bool,
    /// A saved GP model (`fit-noise` output); overrides the generator below.
    pub model: Option<PathBuf>,
    /// Measured `(G, ΔG)` pairs to fit instead of synthetic data.
    pub data: Option<PathBuf>,
    pub synthetic: SynthParams,
    /// Pairs drawn from the synthetic generator.
    pub samples: usize,
    pub train_fraction: f64,
    pub fit_iterations: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            model: None,
            data: None,
            synthetic: SynthParams::default(),
            samples: 8650,
            train_fraction: 0.8,
            fit_iterations: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetId,
    /// Directory holding the dataset files; unused for `synthetic`.
    pub data_dir: Option<PathBuf>,
    pub architecture: String,
    /// Defaults to the dataset's own timestep count.
    pub timesteps: Option<usize>,
    pub lif: LifParams,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Pre-trained checkpoint; pretrained from scratch when absent.
    pub checkpoint: Option<PathBuf>,
    /// Hardware description file; built-in defaults when absent.
    pub hardware: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub device: DeviceSettings,
    pub noise: NoiseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetId::Synthetic,
            data_dir: None,
            architecture: "6-64-6".into(),
            timesteps: None,
            lif: LifParams::default(),
            seed: 0,
            output_dir: PathBuf::from("results/run"),
            checkpoint: None,
            hardware: None,
            synthetic: SyntheticSpec::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            device: DeviceSettings::default(),
            noise: NoiseConfig::default(),
        }
    }
}

/// Independent streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub data: u64,
    pub pretrain: u64,
    pub noise_data: u64,
    pub feedback: u64,
    pub programming: u64,
    pub adapt: u64,
}

impl SeedPlan {
    pub fn from_seed(seed: u64) -> Self {
        // SplitMix64 finaliser gives well-separated stream seeds.
        let mix = |k: u64| {
            let mut z = seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        };
        Self {
            data: mix(1),
            pretrain: mix(2),
            noise_data: mix(3),
            feedback: mix(4),
            programming: mix(5),
            adapt: mix(6),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            offset: e.span().map_or(0, |s| s.start as u64),
            detail: format!("experiment config: {}", e.message()),
        })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    pub fn timesteps(&self) -> Result<usize> {
        self.timesteps
            .or_else(|| self.dataset.timesteps())
            .or(match self.dataset {
                DatasetId::Synthetic => Some(self.synthetic.timesteps),
                _ => None,
            })
            .ok_or_else(|| Error::Config("timesteps not set".into()))
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        NetworkSpec::from_architecture(&self.architecture, self.timesteps()?, self.lif)
    }

    pub fn hardware_config(&self) -> Result<HardwareConfig> {
        match &self.hardware {
            Some(p) => HardwareConfig::load(p),
            None => Ok(HardwareConfig::default()),
        }
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<()> {
        let net = self.network()?;
        if let (Some(f), Some(c)) = (self.dataset.channels(), self.dataset.classes()) {
            if net.inputs() != f || net.classes() != c {
                return Err(Error::Config(format!(
                    "{} needs {f} inputs and {c} classes, architecture is {}",
                    self.dataset, self.architecture
                )));
            }
        }
        if self.dataset == DatasetId::Synthetic
            && (net.inputs() != self.synthetic.features || net.classes() != self.synthetic.classes)
        {
            return Err(Error::Config(format!(
                "synthetic task has {} features and {} classes, architecture is {}",
                self.synthetic.features, self.synthetic.classes, self.architecture
            )));
        }
        if self.dataset == DatasetId::Synthetic && net.timesteps != self.synthetic.timesteps {
            return Err(Error::Config(format!(
                "synthetic task uses {} timesteps, network {}",
                self.synthetic.timesteps, net.timesteps
            )));
        }
        self.adapt.validate()?;
        self.device.read.validate()?;
        self.device.range.validate()?;
        if !(0.0..1.0).contains(&self.noise.train_fraction) || self.noise.train_fraction == 0.0 {
            return Err(Error::Config("noise train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Copies the run seed into every sub-configuration that carries one.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        let seeds = SeedPlan::from_seed(cfg.seed);
        cfg.pretrain.seed = seeds.pretrain;
        cfg.adapt.seed = seeds.adapt;
        cfg.timesteps = Some(cfg.timesteps()?);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn wrong_schema_and_unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("schema_version = 9"),
            Err(Error::Schema(_))
        ));
        match ExperimentConfig::from_toml("schema_version = 1\nbogus = 3\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_shape_mismatch_is_config_error() {
        let cfg = ExperimentConfig {
            dataset: DatasetId::Hhar,
            architecture: "9-128-64-32-6".into(),
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let ok = ExperimentConfig {
            architecture: "6-256-128-64-6".into(),
            ..cfg
        };
        ok.validate().unwrap();
        assert_eq!(ok.timesteps().unwrap(), 100);
    }

    #[test]
    fn seed_streams_differ() {
        let s = SeedPlan::from_seed(0);
        let all = [s.data, s.pretrain, s.noise_data, s.feedback, s.programming, s.adapt];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
