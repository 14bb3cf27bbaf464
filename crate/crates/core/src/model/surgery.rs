use std::collections::HashSet;
use std::fmt;

use super::{BlockId, ModelGraph, ShortcutKind};
use crate::error::{Error, Result};
use crate::kernels::BatchNormParams;

/// One broken invariant found by [`ModelGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// `stem`, `head`, `model` or a block id.
    pub location: String,
    pub msg: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.msg)
    }
}

fn check_bn(loc: &str, bn: &BatchNormParams, channels: usize, out: &mut Vec<Violation>) {
    let mut v = |msg: String| {
        out.push(Violation {
            location: loc.to_string(),
            msg,
        })
    };
    for (name, t) in [
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
        ("running_mean", &bn.running_mean),
        ("running_var", &bn.running_var),
    ] {
        if t.shape() != [channels] {
            v(format!(
                "{name} has shape {:?}, expected [{channels}]",
                t.shape()
            ));
        }
    }
    if bn.running_var.data().iter().any(|&x| x < 0.0) {
        v("negative running variance".into());
    }
    if !(bn.momentum > 0.0 && bn.momentum < 1.0) || !(bn.eps > 0.0) {
        v(format!("bad momentum {} / eps {}", bn.momentum, bn.eps));
    }
}

fn check_conv(
    loc: &str,
    what: &str,
    w: &crate::tensor::Tensor,
    expect: [usize; 2],
    out: &mut Vec<Violation>,
) {
    match w.shape() {
        [o, i, kh, kw] => {
            if [*o, *i] != expect {
                out.push(Violation {
                    location: loc.to_string(),
                    msg: format!("{what} is {o}x{i}, expected {}x{}", expect[0], expect[1]),
                });
            }
            if kh != kw || kh % 2 == 0 {
                out.push(Violation {
                    location: loc.to_string(),
                    msg: format!("{what} kernel {kh}x{kw} is not square and odd"),
                });
            }
        }
        s => out.push(Violation {
            location: loc.to_string(),
            msg: format!("{what} weight has shape {s:?}"),
        }),
    }
}

impl ModelGraph {
    /// Checks every structural invariant and returns all violations found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let cfg = &self.config;

        check_conv(
            "stem",
            "conv",
            &self.stem.conv.weight,
            [cfg.stem_width, cfg.input_shape[0]],
            &mut out,
        );
        check_bn("stem", &self.stem.bn, cfg.stem_width, &mut out);
        if self.stem.conv.stride != 1 {
            out.push(Violation {
                location: "stem".into(),
                msg: "stem conv must have stride 1".into(),
            });
        }

        let mut seen = HashSet::new();
        let retired: HashSet<BlockId> = self.retired.iter().copied().collect();
        let mut width = cfg.stem_width;
        let (mut h, mut w) = (cfg.input_shape[1], cfg.input_shape[2]);
        for b in &self.blocks {
            let loc = b.id.to_string();
            let mut v = |msg: String| {
                out.push(Violation {
                    location: loc.clone(),
                    msg,
                })
            };
            if !seen.insert(b.id) {
                v("duplicate block id".into());
            }
            if retired.contains(&b.id) {
                v("block id was retired".into());
            }
            if b.in_channels != width {
                v(format!(
                    "expects {} input channels, predecessor yields {width}",
                    b.in_channels
                ));
            }
            if b.mid_channels == 0 {
                v("mid_channels is zero".into());
            }
            let stride = b.conv1.stride;
            if stride != 1 && stride != 2 {
                v(format!("conv1 stride {stride}"));
            }
            if b.conv2.stride != 1 {
                v("conv2 must have stride 1".into());
            }
            let downsample = stride != 1 || b.in_channels != b.out_channels;
            match b.shortcut {
                ShortcutKind::Identity if downsample => {
                    v("identity shortcut on a shape-changing block".into())
                }
                ShortcutKind::PadDownsample if !downsample => {
                    v("pad-downsample shortcut on a shape-preserving block".into())
                }
                ShortcutKind::PadDownsample if b.out_channels < b.in_channels => {
                    v("pad-downsample shortcut cannot reduce channels".into())
                }
                _ => {}
            }
            if b.is_prunable != (b.shortcut == ShortcutKind::Identity) {
                v("is_prunable must hold exactly for identity-shortcut blocks".into());
            }
            if h < b.conv1.weight.shape().get(2).copied().unwrap_or(0) {
                v(format!("feature map {h}x{w} smaller than kernel"));
            }
            check_conv(
                &loc,
                "conv1",
                &b.conv1.weight,
                [b.mid_channels, b.in_channels],
                &mut out,
            );
            check_bn(&format!("{loc} bn1"), &b.bn1, b.mid_channels, &mut out);
            check_conv(
                &loc,
                "conv2",
                &b.conv2.weight,
                [b.out_channels, b.mid_channels],
                &mut out,
            );
            check_bn(&format!("{loc} bn2"), &b.bn2, b.out_channels, &mut out);
            width = b.out_channels;
            h = h.div_ceil(stride.max(1));
            w = w.div_ceil(stride.max(1));
        }

        let head_ok = self.head.weight.shape() == [cfg.num_classes, width]
            && self.head.bias.shape() == [cfg.num_classes];
        if !head_ok {
            out.push(Violation {
                location: "head".into(),
                msg: format!(
                    "weight {:?} / bias {:?}, expected [{}, {width}] / [{}]",
                    self.head.weight.shape(),
                    self.head.bias.shape(),
                    cfg.num_classes,
                    cfg.num_classes
                ),
            });
        }
        out
    }

    /// Errors with every violation if [`ModelGraph::validate`] finds any.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            return Ok(());
        }
        let first = v[0].location.clone();
        let msg = v
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::structural(first, msg))
    }

    fn find_block(&self, id: BlockId) -> Result<usize> {
        if let Some(i) = self.blocks.iter().position(|b| b.id == id) {
            return Ok(i);
        }
        if self.retired.contains(&id) {
            Err(Error::Plan(format!("block {id} was already removed")))
        } else {
            Err(Error::Plan(format!("no block {id}")))
        }
    }

    /// Keeps only mid channels `keep` of a block: conv1 filters, bn1 entries
    /// and the matching conv2 input slices.
    pub fn shrink_channels(&mut self, id: BlockId, keep: &[usize]) -> Result<()> {
        let i = self.find_block(id)?;
        let block = &mut self.blocks[i];
        if keep.is_empty() {
            return Err(Error::Pruning(format!(
                "shrinking {id} to zero channels would destroy block"
            )));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan(format!(
                "keep indices for {id} must be strictly increasing"
            )));
        }
        if keep.last().is_some_and(|&k| k >= block.mid_channels) {
            return Err(Error::Plan(format!(
                "keep index out of range for {id} with {} channels",
                block.mid_channels
            )));
        }
        block.conv1.weight = block.conv1.weight.select(0, keep);
        block.bn1 = block.bn1.select(keep);
        block.conv2.weight = block.conv2.weight.select(1, keep);
        block.mid_channels = keep.len();
        self.ensure_valid()
    }

    /// Excises an identity-shortcut block; its id is retired.
    pub fn remove_block(&mut self, id: BlockId) -> Result<()> {
        let i = self.find_block(id)?;
        if !self.blocks[i].is_prunable {
            return Err(Error::Pruning(format!(
                "block {id} not eligible for layer pruning"
            )));
        }
        self.blocks.remove(i);
        self.retired.push(id);
        self.ensure_valid()
    }
}
