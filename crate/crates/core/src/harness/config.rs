//! TOML run configuration with embedded defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::{generate_dataset, Dataset, Split, SyntheticTaskConfig};
use crate::harness::idx::load_idx;
use crate::search::{OptimConfig, SearchConfig};
use crate::supernet::NetConfig;

/// Environment variable that overrides `output_dir`.
pub const OUT_DIR_ENV: &str = "METAKERNEL_OUT_DIR";

/// Learning rate and weight decay used for large-scale training; desk-scale
/// defaults override them.
pub const LARGE_SCALE_LR: f64 = 0.65;
pub const LARGE_SCALE_WEIGHT_DECAY: f64 = 3e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticTaskConfig),
    Idx(IdxSource),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticTaskConfig::default())
    }
}

impl DataConfig {
    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synthetic(cfg) => Ok((
                generate_dataset(cfg, Split::Train)?,
                generate_dataset(cfg, Split::Test)?,
            )),
            DataConfig::Idx(src) => Ok((
                load_idx(&src.train_images, &src.train_labels, src.num_classes)?,
                load_idx(&src.test_images, &src.test_labels, src.num_classes)?,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the network initialization.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub net: NetConfig,
    pub search: SearchConfig,
    /// Retraining of a derived architecture from scratch.
    pub train: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            net: NetConfig::default(),
            search: SearchConfig::default(),
            train: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Sets every seed (init, shuffling, noise, data) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.search.optim.seed = seed;
        self.search.gumbel.seed = seed;
        self.train.seed = seed;
        if let DataConfig::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        self
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        match &self.data {
            DataConfig::Synthetic(s) => {
                s.validate()?;
                if (s.height, s.width, s.num_classes) != (self.net.height, self.net.width, self.net.num_classes)
                    || self.net.in_channels != 1
                {
                    return Err(Error::Config(
                        "synthetic data size and class count must match the network input".into(),
                    ));
                }
            }
            DataConfig::Idx(src) => {
                for p in [&src.train_images, &src.train_labels, &src.test_images, &src.test_labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!("data file {} does not exist", p.display())));
                    }
                }
                if src.num_classes != self.net.num_classes {
                    return Err(Error::Config("IDX class count must match the network".into()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("lambda_cost = 2.0"));
        assert!(text.contains("eta = 0.1"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[search.budget]\ntarget_fraction_of_max = 0.3\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.search.budget.target_fraction_of_max, 0.3);
        assert_eq!(cfg.search.budget.lambda_cost, 2.0);
        assert_eq!(cfg.net, NetConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_mismatches() {
        assert!(matches!(RunConfig::from_toml("sead = 1"), Err(Error::Config(_))));
        let bad = "[data]\nsource = \"synthetic\"\nnum_classes = 3\n";
        assert!(RunConfig::from_toml(bad).is_err());
        let missing = "[net]\nnum_classes = 10\n[data]\nsource = \"idx\"\ntrain_images = \"/nonexistent\"\n\
                       train_labels = \"a\"\ntest_images = \"b\"\ntest_labels = \"c\"\nnum_classes = 10\n";
        assert!(matches!(RunConfig::from_toml(missing), Err(Error::Config(m)) if m.contains("does not exist")));
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!((cfg.seed, cfg.search.optim.seed, cfg.search.gumbel.seed, cfg.train.seed), (9, 9, 9, 9));
        let DataConfig::Synthetic(s) = &cfg.data else { unreachable!() };
        assert_eq!(s.seed, 9);
    }
}
