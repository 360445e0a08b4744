use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    /// Directory holding volumes and `annotations.csv`.
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Steps between run-log records.
    pub log_every: usize,
    /// Fractions of `epochs` after which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Share of scans used for training; `1.0` trains and evaluates on all.
    pub train_fraction: f64,
    pub augment: bool,
    /// Random background crops per nodule-centred crop.
    pub background_per_positive: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            network: NetworkConfig::default(),
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoint"),
            log_every: 1,
            lr_milestones: vec![0.6, 0.85],
            lr_decay: 0.1,
            train_fraction: 0.8,
            augment: true,
            background_per_positive: 1.0,
            grad_clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, epochs and log_every must be >= 1".into(),
            ));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr_milestones must lie in [0, 1]".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::Config("grad_clip_norm must be non-negative".into()));
        }
        if !(self.background_per_positive >= 0.0) {
            return Err(Error::Config(
                "background_per_positive must be non-negative".into(),
            ));
        }
        self.network.validate()
    }

    /// Learning rate for a 0-based epoch under the step schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig {
            epochs: 20,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(11), 0.01);
        assert!((cfg.lr_at(12) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(17) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                train_fraction: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"lr": 0.5, "epochs": 3}"#).unwrap();
        assert_eq!((parsed.lr, parsed.epochs, parsed.batch_size), (0.5, 3, 4));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
    }
}
