//! Binary checkpoint format.
//!
//! ```text
//! "PRLB" | version: u32 LE | header_len: u32 LE | header: UTF-8 JSON | blobs
//! ```
//!
//! The header carries the architecture config, the per-block structure and a
//! manifest of `(name, shape, offset)` entries; `offset` is the byte offset of
//! the tensor inside the blob section. Blobs are little-endian `f32`, stored
//! back to back in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, BlockId, ModelGraph, ResidualBlock, ShortcutKind, Stem};
use crate::error::{Error, Result};
use crate::kernels::{BatchNormParams, ConvParams, LinearParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    id: BlockId,
    in_channels: usize,
    out_channels: usize,
    mid_channels: usize,
    stride: usize,
    shortcut: ShortcutKind,
    is_prunable: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ArchitectureConfig,
    epoch: u64,
    step: u64,
    bn_momentum: f32,
    bn_eps: f32,
    retired: Vec<BlockId>,
    blocks: Vec<BlockHeader>,
    manifest: Vec<ManifestEntry>,
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

impl ModelGraph {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let tensors = self.state_tensors();
        let mut offset = 0u64;
        let manifest = tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            bn_momentum: self.stem.bn.momentum,
            bn_eps: self.stem.bn.eps,
            retired: self.retired.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockHeader {
                    id: b.id,
                    in_channels: b.in_channels,
                    out_channels: b.out_channels,
                    mid_channels: b.mid_channels,
                    stride: b.stride(),
                    shortcut: b.shortcut,
                    is_prunable: b.is_prunable,
                })
                .collect(),
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelGraph> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<ModelGraph> {
        if bytes.len() < 12 {
            return Err(format_err(
                path,
                bytes.len() as u64,
                "file shorter than the fixed preamble",
            ));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format_err(path, 0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format_err(
                path,
                4,
                format!("unsupported version {version}"),
            ));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let blob_start = 12 + header_len;
        if bytes.len() < blob_start {
            return Err(format_err(path, 8, "header extends past end of file"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..blob_start])
            .map_err(|e| format_err(path, 12, format!("header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| format_err(path, 12, format!("header config: {e}")))?;

        let mut model = skeleton(&header);
        let expected: Vec<(String, Vec<usize>)> = model
            .state_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != header.manifest.len() {
            return Err(format_err(
                path,
                12,
                format!(
                    "manifest lists {} tensors, structure needs {}",
                    header.manifest.len(),
                    expected.len()
                ),
            ));
        }
        let blobs = &bytes[blob_start..];
        let mut cursor = 0u64;
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&header.manifest) {
            if &entry.name != name || &entry.shape != shape {
                return Err(format_err(
                    path,
                    12,
                    format!(
                        "manifest entry `{}` {:?} does not match expected `{name}` {shape:?}",
                        entry.name, entry.shape
                    ),
                ));
            }
            if entry.offset != cursor {
                return Err(format_err(
                    path,
                    blob_start as u64 + entry.offset,
                    format!("`{name}` is not contiguous"),
                ));
            }
            let n: usize = shape.iter().product();
            let end = cursor as usize + 4 * n;
            if end > blobs.len() {
                return Err(format_err(
                    path,
                    (blob_start + blobs.len()) as u64,
                    format!("truncated blob `{name}`"),
                ));
            }
            let data = blobs[cursor as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push(Tensor::from_vec(shape, data)?);
            cursor = end as u64;
        }
        if cursor as usize != blobs.len() {
            return Err(format_err(
                path,
                blob_start as u64 + cursor,
                "trailing bytes after last blob",
            ));
        }
        fill(&mut model, loaded);
        model.ensure_valid()?;
        Ok(model)
    }
}

fn bn(channels: usize, h: &Header) -> BatchNormParams {
    let mut p = BatchNormParams::new(channels);
    p.momentum = h.bn_momentum;
    p.eps = h.bn_eps;
    p
}

fn conv(out: usize, inp: usize, stride: usize) -> ConvParams {
    ConvParams {
        weight: Tensor::zeros(&[out, inp, 3, 3]),
        stride,
    }
}

fn skeleton(h: &Header) -> ModelGraph {
    let cfg = &h.config;
    let blocks = h
        .blocks
        .iter()
        .map(|b| ResidualBlock {
            id: b.id,
            conv1: conv(b.mid_channels, b.in_channels, b.stride),
            bn1: bn(b.mid_channels, h),
            conv2: conv(b.out_channels, b.mid_channels, 1),
            bn2: bn(b.out_channels, h),
            shortcut: b.shortcut,
            in_channels: b.in_channels,
            out_channels: b.out_channels,
            mid_channels: b.mid_channels,
            is_prunable: b.is_prunable,
        })
        .collect::<Vec<_>>();
    let width = blocks
        .last()
        .map_or(cfg.stem_width, |b: &ResidualBlock| b.out_channels);
    ModelGraph {
        config: cfg.clone(),
        stem: Stem {
            conv: conv(cfg.stem_width, cfg.input_shape[0], 1),
            bn: bn(cfg.stem_width, h),
        },
        blocks,
        head: LinearParams {
            weight: Tensor::zeros(&[cfg.num_classes, width]),
            bias: Tensor::zeros(&[cfg.num_classes]),
        },
        retired: h.retired.clone(),
        epoch: h.epoch,
        step: h.step,
    }
}

/// Moves `tensors` into the model in `state_tensors` order.
fn fill(model: &mut ModelGraph, tensors: Vec<Tensor>) {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    fn fill_bn(p: &mut BatchNormParams, next: &mut dyn FnMut() -> Tensor) {
        p.gamma = next();
        p.beta = next();
        p.running_mean = next();
        p.running_var = next();
    }
    model.stem.conv.weight = next();
    fill_bn(&mut model.stem.bn, &mut next);
    for b in &mut model.blocks {
        b.conv1.weight = next();
        fill_bn(&mut b.bn1, &mut next);
        b.conv2.weight = next();
        fill_bn(&mut b.bn2, &mut next);
    }
    model.head.weight = next();
    model.head.bias = next();
}
