//! Experiment configuration in TOML.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [architecture]
//! preset = "resnet56"            # resnet56 | resnet8 | custom
//! # custom only:
//! # stem_width = 16
//! # groups = [{ blocks = 9, width = 16, stride = 1 }, ...]
//!
//! [dataset]
//! kind = "synthetic"             # synthetic | cifar
//! num_classes = 4
//! samples_per_class = 64
//! val_samples_per_class = 16
//! image_shape = [3, 16, 16]
//! margin = 2.0
//! # cifar only:
//! # variant = "c100"
//! # train_path = "data/train.bin"
//! # val_path = "data/test.bin"
//! # mean = [0.507, 0.487, 0.441]
//! # std = [0.267, 0.256, 0.276]
//!
//! [training]
//! epochs = 30
//! batch_size = 64
//! learning_rate = 0.05
//! momentum = 0.9
//! weight_decay = 5e-4
//! bn_l1_strength = 1e-4
//! finetune_lr_scale = 0.1
//!
//! [hybrid]
//! order = "cl"
//! criterion = "wm"
//! blocks_to_remove = 1
//! final_finetune_epochs = 2
//! rescore_between_phases = true
//!
//! [hybrid.channel_schedule]
//! target_ratio = 0.3
//! per_iteration_ratio = 0.1
//! finetune_epochs_per_iter = 2
//! min_channels_per_block = 4
//!
//! [hybrid.calibration]
//! batch_count = 4
//! batch_size = 64
//! rank_epsilon = 1e-3
//! ```
//!
//! Every section except `seed` has defaults. Relative paths resolve against
//! the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::criteria::{CalibrationSpec, Criterion};
use crate::data::{
    generate_synthetic, load_cifar_binary, CifarVariant, Dataset, Normalization,
    SyntheticDatasetSpec,
};
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, GroupSpec};
use crate::optim::OptimizerConfig;
use crate::pruner::{ChannelSchedule, HybridConfig, PhaseOrder};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArchitectureSpec {
    #[default]
    Resnet56,
    Resnet8,
    Custom {
        stem_width: usize,
        groups: Vec<GroupSpec>,
    },
}

impl ArchitectureSpec {
    /// Concrete architecture for samples of `input_shape` and `num_classes` labels.
    pub fn resolve(
        &self,
        input_shape: [usize; 3],
        num_classes: usize,
    ) -> Result<ArchitectureConfig> {
        let mut cfg = match self {
            ArchitectureSpec::Resnet56 => ArchitectureConfig::resnet56(num_classes),
            ArchitectureSpec::Resnet8 => ArchitectureConfig::resnet8(input_shape, num_classes),
            ArchitectureSpec::Custom { stem_width, groups } => ArchitectureConfig {
                input_shape,
                num_classes,
                stem_width: *stem_width,
                groups: groups.clone(),
            },
        };
        cfg.input_shape = input_shape;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        num_classes: usize,
        samples_per_class: usize,
        #[serde(default)]
        val_samples_per_class: usize,
        image_shape: [usize; 3],
        margin: f32,
        /// Defaults to the experiment seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Cifar {
        variant: CifarVariant,
        train_path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<[f32; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std: Option<[f32; 3]>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: 4,
            samples_per_class: 64,
            val_samples_per_class: 16,
            image_shape: [3, 16, 16],
            margin: 2.0,
            seed: None,
        }
    }
}

/// Training and validation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
}

impl Splits {
    pub fn val_or_train(&self) -> &Dataset {
        self.val.as_ref().unwrap_or(&self.train)
    }
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { num_classes, .. } => *num_classes,
            DatasetSpec::Cifar { variant, .. } => variant.num_classes(),
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetSpec::Synthetic { image_shape, .. } => *image_shape,
            DatasetSpec::Cifar { .. } => [3, 32, 32],
        }
    }

    pub fn load(&self, experiment_seed: u64) -> Result<Splits> {
        match self {
            DatasetSpec::Synthetic {
                num_classes,
                samples_per_class,
                val_samples_per_class,
                image_shape,
                margin,
                seed,
            } => {
                let all = generate_synthetic(&SyntheticDatasetSpec {
                    num_classes: *num_classes,
                    samples_per_class: samples_per_class + val_samples_per_class,
                    image_shape: *image_shape,
                    margin: *margin,
                    seed: seed.unwrap_or(experiment_seed),
                })?;
                if *val_samples_per_class == 0 {
                    return Ok(Splits {
                        train: all,
                        val: None,
                    });
                }
                let (train, val) = all.split_at(num_classes * samples_per_class);
                Ok(Splits {
                    train,
                    val: Some(val),
                })
            }
            DatasetSpec::Cifar {
                variant,
                train_path,
                val_path,
                ..
            } => {
                let norm = self.normalization();
                let train = load_cifar_binary(train_path, *variant, &norm, None)?;
                let val = val_path
                    .as_ref()
                    .map(|p| load_cifar_binary(p, *variant, &norm, None))
                    .transpose()?;
                Ok(Splits { train, val })
            }
        }
    }

    fn normalization(&self) -> Normalization {
        match self {
            DatasetSpec::Cifar {
                variant, mean, std, ..
            } => {
                let base = match variant {
                    CifarVariant::C10 => Normalization::cifar10(),
                    CifarVariant::C100 => Normalization::cifar100(),
                };
                Normalization {
                    mean: mean.unwrap_or(base.mean),
                    std: std.unwrap_or(base.std),
                }
            }
            DatasetSpec::Synthetic { .. } => Normalization::identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// L1 pressure on BN scales while fine-tuning under the BN criterion.
    pub bn_l1_strength: f32,
    pub finetune_lr_scale: f32,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        TrainingSection {
            epochs: 30,
            batch_size: 64,
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            bn_l1_strength: 1e-4,
            finetune_lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridSection {
    pub order: PhaseOrder,
    pub criterion: Criterion,
    pub blocks_to_remove: usize,
    pub final_finetune_epochs: usize,
    pub rescore_between_phases: bool,
    pub channel_schedule: ChannelSchedule,
    pub calibration: CalibrationSection,
}

impl Default for HybridSection {
    fn default() -> Self {
        let h = HybridConfig::default();
        HybridSection {
            order: h.order,
            criterion: h.criterion,
            blocks_to_remove: h.blocks_to_remove,
            final_finetune_epochs: h.final_finetune_epochs,
            rescore_between_phases: h.rescore_between_phases,
            channel_schedule: h.channel_schedule,
            calibration: CalibrationSection::default(),
        }
    }
}

/// Calibration settings; the sampling seed comes from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub batch_count: usize,
    pub batch_size: usize,
    pub rank_epsilon: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let c = CalibrationSpec::default();
        CalibrationSection {
            batch_count: c.batch_count,
            batch_size: c.batch_size,
            rank_epsilon: c.rank_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub architecture: ArchitectureSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub hybrid: HybridSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Parses TOML text. Relative dataset paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && s.len() < 60)
                .unwrap_or_else(|| "config".to_string());
            Error::config(key, e.message().to_string())
        })?;
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let DatasetSpec::Cifar {
            train_path,
            val_path,
            ..
        } = &mut cfg.dataset
        {
            for p in std::iter::once(train_path).chain(val_path.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Cifar {
            train_path,
            val_path,
            ..
        } = &self.dataset
        {
            for (key, p) in [
                ("dataset.train_path", Some(train_path)),
                ("dataset.val_path", val_path.as_ref()),
            ] {
                if let Some(p) = p {
                    if !p.is_file() {
                        return Err(Error::config(
                            key,
                            format!("{} does not exist", p.display()),
                        ));
                    }
                }
            }
        }
        if let DatasetSpec::Synthetic {
            num_classes,
            samples_per_class,
            image_shape,
            margin,
            ..
        } = &self.dataset
        {
            SyntheticDatasetSpec {
                num_classes: *num_classes,
                samples_per_class: *samples_per_class,
                image_shape: *image_shape,
                margin: *margin,
                seed: 0,
            }
            .validate()?;
        }
        self.architecture()?;
        self.train_config().validate()?;
        if !(self.training.finetune_lr_scale > 0.0) {
            return Err(Error::config(
                "training.finetune_lr_scale",
                "must be positive",
            ));
        }
        self.hybrid_config().channel_schedule.validate()?;
        self.hybrid_config().calibration.validate()
    }

    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        self.architecture
            .resolve(self.dataset.image_shape(), self.dataset.num_classes())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            optimizer: OptimizerConfig {
                learning_rate: t.learning_rate,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                bn_l1_strength: 0.0,
            },
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let mut cfg = self.train_config();
        cfg.optimizer.learning_rate *= self.training.finetune_lr_scale;
        cfg
    }

    pub fn hybrid_config(&self) -> HybridConfig {
        let h = &self.hybrid;
        HybridConfig {
            order: h.order,
            channel_schedule: h.channel_schedule,
            blocks_to_remove: h.blocks_to_remove,
            final_finetune_epochs: h.final_finetune_epochs,
            criterion: h.criterion,
            rescore_between_phases: h.rescore_between_phases,
            calibration: CalibrationSpec {
                batch_count: h.calibration.batch_count,
                batch_size: h.calibration.batch_size,
                seed: self.seed,
                rank_epsilon: h.calibration.rank_epsilon,
            },
            bn_l1_strength: self.training.bn_l1_strength,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 11
output_dir = "out"

[architecture]
preset = "custom"
stem_width = 8
groups = [{ blocks = 2, width = 8, stride = 1 }, { blocks = 1, width = 16, stride = 2 }]

[dataset]
kind = "synthetic"
num_classes = 3
samples_per_class = 10
val_samples_per_class = 2
image_shape = [3, 8, 8]
margin = 1.5

[training]
epochs = 2
batch_size = 16

[hybrid]
order = "lc"
criterion = "fmr"
blocks_to_remove = 2

[hybrid.channel_schedule]
target_ratio = 0.2
per_iteration_ratio = 0.1
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SAMPLE, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
        assert_eq!(cfg.hybrid.order, PhaseOrder::LayersThenChannels);
        assert_eq!(cfg.hybrid.criterion, Criterion::FeatureMapRank);
        assert_eq!(cfg.hybrid.channel_schedule.min_channels_per_block, 4);
        assert_eq!(cfg.architecture().unwrap().groups.len(), 2);
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn synthetic_splits_are_balanced() {
        let cfg = ExperimentConfig::from_toml(SAMPLE, Path::new(".")).unwrap();
        let s = cfg.dataset.load(cfg.seed).unwrap();
        assert_eq!(s.train.len(), 30);
        assert_eq!(s.val.as_ref().unwrap().len(), 6);
        for c in 0..3 {
            assert_eq!(s.train.labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn seed_is_mandatory() {
        let err = ExperimentConfig::from_toml("output_dir = \"x\"\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn missing_dataset_path_names_the_key() {
        let text = "seed = 1\n[dataset]\nkind = \"cifar\"\nvariant = \"c100\"\ntrain_path = \"nope.bin\"\n";
        let err = ExperimentConfig::from_toml(text, Path::new("/nonexistent")).unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "dataset.train_path"),
            "{err}"
        );
    }

    #[test]
    fn bad_values_are_config_errors() {
        let text = SAMPLE.replace("criterion = \"fmr\"", "criterion = \"nope\"");
        assert!(matches!(
            ExperimentConfig::from_toml(&text, Path::new(".")),
            Err(Error::Config { .. })
        ));
        let text = SAMPLE.replace("batch_size = 16", "batch_size = 1");
        let err = ExperimentConfig::from_toml(&text, Path::new(".")).unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "train.batch_size"),
            "{err}"
        );
    }
}
