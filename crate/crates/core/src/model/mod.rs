//! ResNet-style model graph: architecture description, parameter storage,
//! forward/backward execution and the structural surgery used by pruning.

mod checkpoint;
mod exec;
mod surgery;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{BatchNormParams, ConvParams, LinearParams};
use crate::optim::{ParamKind, ParamMut};
use crate::tensor::Tensor;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use exec::ForwardOutput;
pub use surgery::Violation;

/// One residual group: `blocks` blocks of `width` channels; the first block
/// uses `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stem_width: usize,
    pub groups: Vec<GroupSpec>,
}

impl ArchitectureConfig {
    /// ResNet-56 for 32x32 RGB input: three groups of nine blocks at widths 16/32/64.
    pub fn resnet56(num_classes: usize) -> Self {
        ArchitectureConfig {
            input_shape: [3, 32, 32],
            num_classes,
            stem_width: 16,
            groups: vec![
                GroupSpec {
                    blocks: 9,
                    width: 16,
                    stride: 1,
                },
                GroupSpec {
                    blocks: 9,
                    width: 32,
                    stride: 2,
                },
                GroupSpec {
                    blocks: 9,
                    width: 64,
                    stride: 2,
                },
            ],
        }
    }

    pub fn resnet56_cifar100() -> Self {
        Self::resnet56(100)
    }

    /// ResNet-8-style network with one block per group, for desk-scale runs.
    pub fn resnet8(input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchitectureConfig {
            input_shape,
            num_classes,
            stem_width: 8,
            groups: vec![
                GroupSpec {
                    blocks: 1,
                    width: 8,
                    stride: 1,
                },
                GroupSpec {
                    blocks: 1,
                    width: 16,
                    stride: 2,
                },
                GroupSpec {
                    blocks: 1,
                    width: 16,
                    stride: 2,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::config("input_shape", "extents must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if self.stem_width == 0 {
            return Err(Error::config("stem_width", "must be positive"));
        }
        if self.groups.is_empty() {
            return Err(Error::config("groups", "at least one group is required"));
        }
        let mut width = self.stem_width;
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for (g, spec) in self.groups.iter().enumerate() {
            let key = format!("groups[{g}]");
            if spec.blocks == 0 || spec.width == 0 {
                return Err(Error::config(key, "block count and width must be positive"));
            }
            if spec.stride != 1 && spec.stride != 2 {
                return Err(Error::config(key, "stride must be 1 or 2"));
            }
            if spec.width < width {
                return Err(Error::config(key, "width may not shrink between groups"));
            }
            if h < 3 || w < 3 {
                return Err(Error::config(
                    key,
                    "feature map smaller than the 3x3 kernel",
                ));
            }
            h = h.div_ceil(spec.stride);
            w = w.div_ceil(spec.stride);
            width = spec.width;
        }
        Ok(())
    }
}

/// Stable block identifier: group index and position within the group at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub group: usize,
    pub index: usize,
}

impl BlockId {
    pub fn new(group: usize, index: usize) -> Self {
        BlockId { group, index }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}.b{}", self.group, self.index)
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Plan(format!("malformed block id `{s}`"));
        let (g, b) = s.split_once('.').ok_or_else(bad)?;
        let group = g
            .strip_prefix('g')
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let index = b
            .strip_prefix('b')
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        Ok(BlockId { group, index })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShortcutKind {
    Identity,
    /// Stride-2 spatial subsampling followed by zero-padding of the new channels.
    PadDownsample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub id: BlockId,
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
    pub shortcut: ShortcutKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of conv1's output; the only width channel pruning changes.
    pub mid_channels: usize,
    pub is_prunable: bool,
}

impl ResidualBlock {
    pub fn stride(&self) -> usize {
        self.conv1.stride
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

/// Post-bn1 feature maps of the last forward pass, keyed by block.
pub type ActivationCache = BTreeMap<BlockId, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub config: ArchitectureConfig,
    pub stem: Stem,
    pub blocks: Vec<ResidualBlock>,
    pub head: LinearParams,
    /// Ids of blocks removed by layer pruning; never reassigned.
    pub retired: Vec<BlockId>,
    pub epoch: u64,
    pub step: u64,
}

fn kaiming(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

fn conv(out: usize, inp: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvParams {
    ConvParams {
        weight: kaiming(&[out, inp, 3, 3], rng),
        stride,
    }
}

/// Builds a freshly initialized model. Conv weights use fan-in Kaiming
/// normal initialization, BN scales start at one, every bias at zero.
pub fn build_model(config: &ArchitectureConfig, init_seed: u64) -> Result<ModelGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let stem = Stem {
        conv: conv(config.stem_width, config.input_shape[0], 1, &mut rng),
        bn: BatchNormParams::new(config.stem_width),
    };
    let mut blocks = Vec::new();
    let mut width = config.stem_width;
    for (g, spec) in config.groups.iter().enumerate() {
        for i in 0..spec.blocks {
            let stride = if i == 0 { spec.stride } else { 1 };
            let downsample = stride != 1 || width != spec.width;
            blocks.push(ResidualBlock {
                id: BlockId::new(g, i),
                conv1: conv(spec.width, width, stride, &mut rng),
                bn1: BatchNormParams::new(spec.width),
                conv2: conv(spec.width, spec.width, 1, &mut rng),
                bn2: BatchNormParams::new(spec.width),
                shortcut: if downsample {
                    ShortcutKind::PadDownsample
                } else {
                    ShortcutKind::Identity
                },
                in_channels: width,
                out_channels: spec.width,
                mid_channels: spec.width,
                is_prunable: !downsample,
            });
            width = spec.width;
        }
    }
    let head = LinearParams {
        weight: Tensor::randn(
            &[config.num_classes, width],
            (1.0 / width as f32).sqrt(),
            &mut rng,
        ),
        bias: Tensor::zeros(&[config.num_classes]),
    };
    Ok(ModelGraph {
        config: config.clone(),
        stem,
        blocks,
        head,
        retired: Vec::new(),
        epoch: 0,
        step: 0,
    })
}

impl ModelGraph {
    pub fn block(&self, id: BlockId) -> Option<&ResidualBlock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut ResidualBlock> {
        self.blocks.iter_mut().find(|b| b.id == id)
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.blocks.iter().map(|b| b.id).collect()
    }

    pub fn prunable_block_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_prunable).count()
    }

    pub fn total_mid_channels(&self) -> usize {
        self.blocks.iter().map(|b| b.mid_channels).sum()
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = vec![
            (
                "stem.conv.weight".to_string(),
                ParamKind::ConvWeight,
                &self.stem.conv.weight,
            ),
            (
                "stem.bn.gamma".to_string(),
                ParamKind::BnGamma,
                &self.stem.bn.gamma,
            ),
            (
                "stem.bn.beta".to_string(),
                ParamKind::BnBeta,
                &self.stem.bn.beta,
            ),
        ];
        for b in &self.blocks {
            let p = b.id.to_string();
            out.push((
                format!("{p}.conv1.weight"),
                ParamKind::ConvWeight,
                &b.conv1.weight,
            ));
            out.push((format!("{p}.bn1.gamma"), ParamKind::BnGamma, &b.bn1.gamma));
            out.push((format!("{p}.bn1.beta"), ParamKind::BnBeta, &b.bn1.beta));
            out.push((
                format!("{p}.conv2.weight"),
                ParamKind::ConvWeight,
                &b.conv2.weight,
            ));
            out.push((format!("{p}.bn2.gamma"), ParamKind::BnGamma, &b.bn2.gamma));
            out.push((format!("{p}.bn2.beta"), ParamKind::BnBeta, &b.bn2.beta));
        }
        out.push((
            "head.weight".to_string(),
            ParamKind::LinearWeight,
            &self.head.weight,
        ));
        out.push((
            "head.bias".to_string(),
            ParamKind::LinearBias,
            &self.head.bias,
        ));
        out
    }

    /// Same order as [`ModelGraph::params`].
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn pm(name: String, kind: ParamKind, tensor: &mut Tensor) -> ParamMut<'_> {
            ParamMut { name, kind, tensor }
        }
        let mut out = vec![
            pm(
                "stem.conv.weight".into(),
                ParamKind::ConvWeight,
                &mut self.stem.conv.weight,
            ),
            pm(
                "stem.bn.gamma".into(),
                ParamKind::BnGamma,
                &mut self.stem.bn.gamma,
            ),
            pm(
                "stem.bn.beta".into(),
                ParamKind::BnBeta,
                &mut self.stem.bn.beta,
            ),
        ];
        for b in &mut self.blocks {
            let p = b.id.to_string();
            out.push(pm(
                format!("{p}.conv1.weight"),
                ParamKind::ConvWeight,
                &mut b.conv1.weight,
            ));
            out.push(pm(
                format!("{p}.bn1.gamma"),
                ParamKind::BnGamma,
                &mut b.bn1.gamma,
            ));
            out.push(pm(
                format!("{p}.bn1.beta"),
                ParamKind::BnBeta,
                &mut b.bn1.beta,
            ));
            out.push(pm(
                format!("{p}.conv2.weight"),
                ParamKind::ConvWeight,
                &mut b.conv2.weight,
            ));
            out.push(pm(
                format!("{p}.bn2.gamma"),
                ParamKind::BnGamma,
                &mut b.bn2.gamma,
            ));
            out.push(pm(
                format!("{p}.bn2.beta"),
                ParamKind::BnBeta,
                &mut b.bn2.beta,
            ));
        }
        out.push(pm(
            "head.weight".into(),
            ParamKind::LinearWeight,
            &mut self.head.weight,
        ));
        out.push(pm(
            "head.bias".into(),
            ParamKind::LinearBias,
            &mut self.head.bias,
        ));
        out
    }

    /// Every stored tensor, trainable or not (adds BN running statistics).
    pub fn state_tensors(&self) -> Vec<(String, &Tensor)> {
        fn bn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a BatchNormParams) {
            out.push((format!("{prefix}.gamma"), &p.gamma));
            out.push((format!("{prefix}.beta"), &p.beta));
            out.push((format!("{prefix}.running_mean"), &p.running_mean));
            out.push((format!("{prefix}.running_var"), &p.running_var));
        }
        let mut out = vec![("stem.conv.weight".to_string(), &self.stem.conv.weight)];
        bn(&mut out, "stem.bn", &self.stem.bn);
        for b in &self.blocks {
            let p = b.id.to_string();
            out.push((format!("{p}.conv1.weight"), &b.conv1.weight));
            bn(&mut out, &format!("{p}.bn1"), &b.bn1);
            out.push((format!("{p}.conv2.weight"), &b.conv2.weight));
            bn(&mut out, &format!("{p}.bn2"), &b.bn2);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// FNV-1a over every stored tensor's bits; changes whenever any value does.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.state_tensors() {
            for byte in name.bytes() {
                h = (h ^ byte as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}
