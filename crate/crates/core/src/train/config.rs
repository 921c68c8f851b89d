use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::NetworkConfig;
use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::objective::{LossKind, PenaltyMatrix};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest with a split column; relative paths resolve against the
    /// config file's directory.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drawn and logged when absent.
    pub seed: Option<u64>,
    /// Write `last.ckpt` every this many epochs; 0 writes it only at the end.
    pub checkpoint_every: usize,
    /// Batch-norm running-statistics momentum.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            momentum: 0.9,
            epochs: 30,
            batch_size: 24,
            seed: None,
            checkpoint_every: 1,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub penalty: PenaltyMatrix,
}

/// Everything a training run depends on; the `[data]`, `[model]`,
/// `[train]`, `[augment]` and `[loss]` sections of the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPolicy,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        let t = &self.train;
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(Error::config(format!("learning rate {} must be ≥ 0", t.learning_rate)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", t.momentum)));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(Error::config(format!("batch-norm momentum {} outside [0, 1]", t.bn_momentum)));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::config("batch size and epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// SHA-256 over the architecture section; checkpoints are only
    /// interchangeable between identical architectures.
    pub fn model_hash(&self) -> Result<[u8; 32]> {
        model_hash(&self.model)
    }
}

pub fn model_hash(model: &NetworkConfig) -> Result<[u8; 32]> {
    let text = toml::to_string(model).map_err(|e| Error::config(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 5e-4);
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.train.batch_size, 24);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.loss.kind, LossKind::Ordinal);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.model = NetworkConfig::toy();
        c.train.seed = Some(11);
        c.loss.kind = LossKind::CrossEntropy;
        let text = c.to_toml().unwrap();
        assert!(text.contains("[loss]") && text.contains("penalty"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_and_errors() {
        let c = RunConfig::from_toml("[train]\nepochs = 3\n[model]\nattention = false\n").unwrap();
        assert_eq!((c.train.epochs, c.model.attention), (3, false));
        assert!(matches!(RunConfig::from_toml("[train]\nepochs = 0\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        let bad = "[loss]\npenalty = [[1,3,6,7,9],[4,1,4,5,7],[6,4,2,3,5],[9,7,4,1,4],[11,9,7,5,1]]\n";
        assert!(RunConfig::from_toml(bad).is_err());
    }

    #[test]
    fn hash_tracks_architecture_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 99;
        assert_eq!(a.model_hash().unwrap(), b.model_hash().unwrap());
        b.model.attention = false;
        assert_ne!(a.model_hash().unwrap(), b.model_hash().unwrap());
    }
}
