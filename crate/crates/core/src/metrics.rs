//! Accuracy, exact parameter and FLOP counters, and the latency harness.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::ConvParams;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Counting convention used by [`count_flops`]; emitted in every report header.
pub const FLOPS_CONVENTION: &str = "1 FLOP per multiply-accumulate in conv/linear; \
BN 2 per output element; ReLU 1 per element; residual add 1 per element; \
global pool 1 per pooled element; batch size 1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// `stem`, a block id, or `head`.
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub param_count: u64,
    pub flop_count: u64,
    pub breakdown: Vec<LayerCost>,
}

impl ComplexityReport {
    pub fn entry(&self, name: &str) -> Option<&LayerCost> {
        self.breakdown.iter().find(|c| c.name == name)
    }
}

fn conv_params(o: usize, i: usize, k: usize) -> u64 {
    (o * i * k * k) as u64
}

/// Multiply-accumulates of `conv` producing an `oh x ow` output map.
pub fn conv_macs(conv: &ConvParams, oh: usize, ow: usize) -> u64 {
    conv_params(conv.out_channels(), conv.in_channels(), conv.kernel_size()) * (oh * ow) as u64
}

/// Exact trainable-scalar count with a per-structure breakdown. BN running
/// statistics are not counted.
pub fn count_params(model: &ModelGraph) -> (u64, Vec<(String, u64)>) {
    let mut out = Vec::with_capacity(model.blocks.len() + 2);
    let s = &model.stem;
    out.push((
        "stem".to_string(),
        conv_params(
            s.conv.out_channels(),
            s.conv.in_channels(),
            s.conv.kernel_size(),
        ) + 2 * s.bn.channels() as u64,
    ));
    for b in &model.blocks {
        let p = conv_params(
            b.conv1.out_channels(),
            b.conv1.in_channels(),
            b.conv1.kernel_size(),
        ) + 2 * b.bn1.channels() as u64
            + conv_params(
                b.conv2.out_channels(),
                b.conv2.in_channels(),
                b.conv2.kernel_size(),
            )
            + 2 * b.bn2.channels() as u64;
        out.push((b.id.to_string(), p));
    }
    out.push((
        "head".to_string(),
        (model.head.weight.len() + model.head.bias.len()) as u64,
    ));
    (out.iter().map(|(_, p)| p).sum(), out)
}

/// FLOPs of one forward pass at batch size 1 under [`FLOPS_CONVENTION`].
pub fn count_flops(
    model: &ModelGraph,
    input_shape: [usize; 3],
) -> Result<(u64, Vec<(String, u64)>)> {
    let [c, mut h, mut w] = input_shape;
    if c != model.config.input_shape[0] {
        return Err(Error::structural(
            "input",
            format!(
                "{c} input channels, model expects {}",
                model.config.input_shape[0]
            ),
        ));
    }
    let mut out = Vec::with_capacity(model.blocks.len() + 2);
    let stem = &model.stem.conv;
    let elems = (stem.out_channels() * h * w) as u64;
    out.push(("stem".to_string(), conv_macs(stem, h, w) + 3 * elems));
    let mut width = stem.out_channels();
    for b in &model.blocks {
        let (oh, ow) = b.conv1.output_hw(h, w);
        let area = (oh * ow) as u64;
        let mid = b.mid_channels as u64;
        let outc = b.out_channels as u64;
        let conv1 = conv_macs(&b.conv1, oh, ow);
        let conv2 = conv_macs(&b.conv2, oh, ow);
        // bn1 + relu on mid, bn2 + add + relu on out
        let elementwise = 3 * mid * area + 4 * outc * area;
        out.push((b.id.to_string(), conv1 + conv2 + elementwise));
        h = oh;
        w = ow;
        width = b.out_channels;
    }
    let pool = (width * h * w) as u64;
    out.push(("head".to_string(), pool + model.head.weight.len() as u64));
    Ok((out.iter().map(|(_, f)| f).sum(), out))
}

pub fn complexity(model: &ModelGraph) -> Result<ComplexityReport> {
    let (param_count, params) = count_params(model);
    let (flop_count, flops) = count_flops(model, model.config.input_shape)?;
    let breakdown = params
        .into_iter()
        .zip(flops)
        .map(|((name, params), (_, flops))| LayerCost {
            name,
            params,
            flops,
        })
        .collect();
    Ok(ComplexityReport {
        param_count,
        flop_count,
        breakdown,
    })
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode top-1 accuracy in `[0, 1]`.
pub fn evaluate_accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data(
            "cannot evaluate accuracy on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let logits = model.infer(&x, false)?.logits;
        let k = logits.dim(1);
        correct += logits
            .data()
            .chunks(k)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mean_ms: f64,
    pub samples_ms: Vec<f64>,
    pub warmup_passes: usize,
    pub batch_size: usize,
    /// `(1 - pruned / baseline) * 100` when compared against a baseline.
    pub reduction_vs_baseline: Option<f64>,
}

impl LatencyReport {
    pub fn from_samples(samples_ms: Vec<f64>, warmup_passes: usize, batch_size: usize) -> Self {
        let mean_ms = samples_ms.iter().sum::<f64>() / samples_ms.len().max(1) as f64;
        LatencyReport {
            mean_ms,
            samples_ms,
            warmup_passes,
            batch_size,
            reduction_vs_baseline: None,
        }
    }

    pub fn same_protocol(&self, other: &LatencyReport) -> bool {
        self.warmup_passes == other.warmup_passes
            && self.batch_size == other.batch_size
            && self.samples_ms.len() == other.samples_ms.len()
    }

    pub fn compare_to(&mut self, baseline: &LatencyReport) -> Result<f64> {
        if !self.same_protocol(baseline) {
            return Err(Error::Report(
                "latency reports use different protocols".into(),
            ));
        }
        let r = reduction_pct(baseline.mean_ms, self.mean_ms);
        self.reduction_vs_baseline = Some(r);
        Ok(r)
    }
}

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_PASSES: usize = 100;

/// Times `passes` eval-mode forward passes after `warmup` untimed ones, on a
/// fixed random input reused for every pass.
pub fn measure_latency(
    model: &ModelGraph,
    batch_size: usize,
    warmup: usize,
    passes: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if batch_size == 0 || passes == 0 {
        return Err(Error::config(
            "bench",
            "batch size and pass count must be positive",
        ));
    }
    let [c, h, w] = model.config.input_shape;
    let input = Tensor::randn(
        &[batch_size, c, h, w],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    for _ in 0..warmup {
        std::hint::black_box(model.infer(&input, false)?);
    }
    let mut samples = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t0 = Instant::now();
        std::hint::black_box(model.infer(std::hint::black_box(&input), false)?);
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport::from_samples(samples, warmup, batch_size))
}

/// Percentage reduction from `baseline` to `pruned`.
pub fn reduction_pct(baseline: f64, pruned: f64) -> f64 {
    if baseline == 0.0 {
        return 0.0;
    }
    (1.0 - pruned / baseline) * 100.0
}

/// Measured metrics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub accuracy: Option<f64>,
    pub params: u64,
    pub flops: u64,
    pub latency: Option<LatencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub method: String,
    /// Accuracy change in percentage points (pruned - baseline).
    pub accuracy_delta_points: Option<f64>,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
    pub latency_reduction_pct: Option<f64>,
}

pub fn reduction_summary(baseline: &MetricsRow, pruned: &MetricsRow) -> Result<ReductionRow> {
    let latency_reduction_pct = match (&baseline.latency, &pruned.latency) {
        (Some(b), Some(p)) => {
            if !b.same_protocol(p) {
                return Err(Error::Report(format!(
                    "`{}` and `{}` were timed with different protocols",
                    baseline.method, pruned.method
                )));
            }
            Some(reduction_pct(b.mean_ms, p.mean_ms))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Report(format!(
                "latency present for only one of `{}` and `{}`",
                baseline.method, pruned.method
            )))
        }
    };
    Ok(ReductionRow {
        method: pruned.method.clone(),
        accuracy_delta_points: baseline
            .accuracy
            .zip(pruned.accuracy)
            .map(|(b, p)| (p - b) * 100.0),
        params_reduction_pct: reduction_pct(baseline.params as f64, pruned.params as f64),
        flops_reduction_pct: reduction_pct(baseline.flops as f64, pruned.flops as f64),
        latency_reduction_pct,
    })
}
