//! Run configuration file: every section optional, every key defaulted,
//! unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cem::CemConfig;
use crate::ddpm::DiffusionConfig;
use crate::error::{Error, Result};
use crate::sim::WorldConfig;
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub checkpoint_interval: u64,
    /// 0 uses every available core.
    pub workers: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            checkpoint_interval: 100_000,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub diffusion: DiffusionConfig,
    pub trainer: TrainerConfig,
    pub cem: CemConfig,
    pub metrics: MetricsConfig,
    pub mc: McConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.diffusion.validate()?;
        self.trainer.validate()?;
        self.cem.validate()?;
        if self.metrics.k == 0 {
            return Err(Error::Config("metrics.k must be at least 1".into()));
        }
        if self.mc.checkpoint_interval == 0 {
            return Err(Error::Config("mc.checkpoint_interval must be at least 1".into()));
        }
        Ok(())
    }

    /// JSON with keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        // serde_json::Value keeps object keys in a BTreeMap
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex sha256 of the canonical JSON of the sections that shape stored
    /// artifacts. `metrics` and `mc` only affect evaluation and scheduling,
    /// so they are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.mc = McConfig::default();
        c.metrics = MetricsConfig::default();
        let digest = Sha256::digest(c.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[world]\nlane_widht = 0.1").is_err());
        assert!(RunConfig::from_toml_str("[trainer.optimizer]\nlearning_rate = 0.1").is_err());
    }

    #[test]
    fn partial_sections() {
        let c = RunConfig::from_toml_str("[trainer]\nbatch_size = 32\n[metrics]\nk = 3").unwrap();
        assert_eq!(c.trainer.batch_size, 32);
        assert_eq!(c.trainer.alpha, TrainerConfig::default().alpha);
        assert_eq!(c.metrics.k, 3);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[metrics]\nk = 0").is_err());
        assert!(RunConfig::from_toml_str("[trainer]\nalpha = 1.5").is_err());
    }

    #[test]
    fn hash_tracks_results_not_plumbing() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.mc.workers = 3;
        b.metrics.k = 2;
        assert_eq!(a.hash(), b.hash());
        b.world.gamma *= 2.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
