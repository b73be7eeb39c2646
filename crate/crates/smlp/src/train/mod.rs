//! Desk-scale supervised training: AdamW with decoupled weight decay, linear
//! warmup + cosine decay, label-smoothing cross-entropy, CIFAR-10 binary
//! data, checkpoints, and a deterministic single-threaded loop.

pub mod checkpoint;
pub mod cifar;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cifar::{
    load_file, load_test_dir, load_train_dir, write_synthetic_dir, Dataset, Normalize,
};
pub use optim::{adamw_step, AdamState};
pub use schedule::lr_at;
pub use trainer::{evaluate, train, EpochLog, TrainLog};

use crate::error::{Error, Result};
use crate::textcfg::{parse_bool, TextConfig};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Random horizontal flip + 4-pixel-pad random crop.
    pub augment: bool,
    /// Train on only the first N samples when set.
    pub subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 5,
            total_epochs: 20,
            batch_size: 64,
            label_smoothing: 0.1,
            seed: 42,
            augment: true,
            subset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr_min {} exceeds lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({} epochs) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Reads the `[train]` section; absent keys keep defaults.
    pub fn from_config(cfg: &TextConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let config = TrainConfig {
            lr_max: cfg.parse_value("train", "lr_max")?.unwrap_or(d.lr_max),
            lr_min: cfg.parse_value("train", "lr_min")?.unwrap_or(d.lr_min),
            weight_decay: cfg
                .parse_value("train", "weight_decay")?
                .unwrap_or(d.weight_decay),
            warmup_epochs: cfg
                .parse_value("train", "warmup_epochs")?
                .unwrap_or(d.warmup_epochs),
            total_epochs: cfg
                .parse_value("train", "epochs")?
                .unwrap_or(d.total_epochs),
            batch_size: cfg
                .parse_value("train", "batch_size")?
                .unwrap_or(d.batch_size),
            label_smoothing: cfg
                .parse_value("train", "label_smoothing")?
                .unwrap_or(d.label_smoothing),
            seed: cfg.parse_value("train", "seed")?.unwrap_or(d.seed),
            augment: match cfg.get("train", "augment") {
                Some(raw) => parse_bool(raw)?,
                None => d.augment,
            },
            subset: cfg.parse_value("train", "subset")?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_fields() {
        let smoothing = TrainConfig {
            label_smoothing: 1.0,
            ..TrainConfig::default()
        };
        assert!(smoothing.validate().is_err());
        let crossed = TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        };
        assert!(crossed.validate().is_err());
        let long_warmup = TrainConfig {
            warmup_epochs: TrainConfig::default().total_epochs,
            ..TrainConfig::default()
        };
        assert!(long_warmup.validate().is_err());
    }

    #[test]
    fn reads_train_section() {
        let cfg = TextConfig::parse(
            "[train]\nepochs = 30\nbatch_size = 16\nseed = 7\naugment = false\nsubset = 512\n",
        )
        .unwrap();
        let tc = TrainConfig::from_config(&cfg).unwrap();
        assert_eq!(tc.total_epochs, 30);
        assert_eq!(tc.batch_size, 16);
        assert_eq!(tc.seed, 7);
        assert!(!tc.augment);
        assert_eq!(tc.subset, Some(512));
        assert_eq!(tc.lr_max, 1e-3);
    }
}
