//! Mini-batch SGD training loop.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::evaluate_accuracy;
use crate::model::ModelGraph;
use crate::optim::{OptimizerConfig, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    /// Fine-tuning defaults: same schedule shape at a tenth of the learning rate.
    pub fn finetune(&self, epochs: usize) -> TrainConfig {
        let mut cfg = *self;
        cfg.epochs = epochs;
        cfg.optimizer.learning_rate *= 0.1;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(
                "train.batch_size",
                "must be at least 2 for batch statistics",
            ));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch)
}

/// One pass over `data` in a seeded order; batches of a single sample are skipped.
pub fn train_epoch(
    model: &mut ModelGraph,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("training data is empty".into()));
    }
    let mut total = 0f64;
    let mut count = 0usize;
    for idx in data.shuffled_batches(batch_size, epoch_seed(seed, model.epoch)) {
        if idx.len() < 2 {
            continue;
        }
        let (x, y) = data.batch(&idx);
        total += model.train_step(&x, &y, opt)? as f64 * idx.len() as f64;
        count += idx.len();
    }
    model.epoch += 1;
    Ok(total / count.max(1) as f64)
}

/// Trains for `cfg.epochs` epochs, recording validation accuracy after each
/// when `val` is given.
pub fn train(
    model: &mut ModelGraph,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mean_loss = train_epoch(model, data, cfg.batch_size, cfg.seed, &mut opt)?;
        let val_accuracy = val.map(|v| evaluate_accuracy(model, v)).transpose()?;
        log.push(EpochRecord {
            epoch: model.epoch,
            mean_loss,
            val_accuracy,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticDatasetSpec};
    use crate::model::{build_model, ArchitectureConfig};

    #[test]
    fn training_reduces_loss() {
        let data = generate_synthetic(&SyntheticDatasetSpec {
            num_classes: 2,
            samples_per_class: 16,
            image_shape: [3, 8, 8],
            margin: 1.0,
            seed: 3,
        })
        .unwrap();
        let mut m = build_model(&ArchitectureConfig::resnet8([3, 8, 8], 2), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            seed: 1,
            optimizer: OptimizerConfig::default(),
        };
        let log = train(&mut m, &data, Some(&data), &cfg).unwrap();
        assert!(log.last().unwrap().mean_loss < log[0].mean_loss);
        assert_eq!(m.epoch, 6);
        assert_eq!(m.step, 6 * 4);
    }

    #[test]
    fn finetune_scales_learning_rate() {
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        };
        let ft = cfg.finetune(2);
        assert_eq!(ft.epochs, 2);
        assert!((ft.optimizer.learning_rate - 0.1 * cfg.optimizer.learning_rate).abs() < 1e-9);
    }
}
