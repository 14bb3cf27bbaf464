//! Filter and block importance criteria.
//!
//! Every criterion scores the filters of each block's first convolution (the
//! structures channel surgery removes) and scores a block as the mean of its
//! filter scores.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{Mode, FILTER_AXIS};
use crate::model::{BlockId, ModelGraph};
use crate::svd::threshold_rank;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[serde(rename = "wm")]
    WeightMagnitude,
    #[serde(rename = "bn")]
    BnScale,
    #[serde(rename = "fmr")]
    FeatureMapRank,
    Taylor,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::WeightMagnitude,
        Criterion::BnScale,
        Criterion::FeatureMapRank,
        Criterion::Taylor,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Criterion::WeightMagnitude => "wm",
            Criterion::BnScale => "bn",
            Criterion::FeatureMapRank => "fmr",
            Criterion::Taylor => "taylor",
        }
    }

    /// Row label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Criterion::WeightMagnitude => "Weight Magnitude",
            Criterion::BnScale => "Batch Normalization Scale",
            Criterion::FeatureMapRank => "Feature Maps Rank",
            Criterion::Taylor => "Weight Taylor",
        }
    }

    pub fn needs_data(self) -> bool {
        matches!(self, Criterion::FeatureMapRank | Criterion::Taylor)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| {
                Error::config(
                    "criterion",
                    format!("unknown criterion `{s}` (wm, bn, fmr, taylor)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub batch_count: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Singular values at or below this do not count toward a feature map's rank.
    pub rank_epsilon: f64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            batch_count: 4,
            batch_size: 64,
            seed: 0,
            rank_epsilon: 1e-3,
        }
    }
}

impl CalibrationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_count == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "calibration",
                "batch count and size must be positive",
            ));
        }
        if !(self.rank_epsilon > 0.0) {
            return Err(Error::config(
                "calibration.rank_epsilon",
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_step: u64,
    pub calibration: Option<CalibrationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub prunable: bool,
    pub filters: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub criterion: Criterion,
    pub blocks: BTreeMap<BlockId, BlockScores>,
    pub provenance: Provenance,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl ImportanceTable {
    pub fn new(criterion: Criterion, provenance: Provenance) -> Self {
        ImportanceTable {
            criterion,
            blocks: BTreeMap::new(),
            provenance,
        }
    }

    /// Records a block's filter scores; the block score is their mean.
    pub fn insert(&mut self, id: BlockId, prunable: bool, filters: Vec<f64>) {
        let score = mean(&filters);
        self.blocks.insert(
            id,
            BlockScores {
                prunable,
                filters,
                score,
            },
        );
    }

    pub fn block_score(&self, id: BlockId) -> Option<f64> {
        self.blocks.get(&id).map(|b| b.score)
    }

    /// Rows `criterion,block_id,filter_index,score`; block rows use `BLOCK`
    /// as the filter index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("criterion,block_id,filter_index,score\n");
        for (id, b) in &self.blocks {
            for (i, s) in b.filters.iter().enumerate() {
                out.push_str(&format!("{},{id},{i},{s}\n", self.criterion));
            }
            out.push_str(&format!("{},{id},BLOCK,{}\n", self.criterion, b.score));
        }
        out
    }

    /// Whitespace-separated `index block_id score prunable` columns for gnuplot.
    pub fn histogram(&self) -> String {
        let mut out = format!(
            "# {} block importance\n# index block_id score prunable\n",
            self.criterion.display_name()
        );
        for (i, (id, b)) in self.blocks.iter().enumerate() {
            out.push_str(&format!("{i} {id} {} {}\n", b.score, u8::from(b.prunable)));
        }
        out
    }
}

fn provenance(model: &ModelGraph, spec: Option<CalibrationSpec>) -> Provenance {
    Provenance {
        model_step: model.step,
        calibration: spec,
    }
}

/// Filter score: L1 norm of the filter's conv1 weights.
pub fn score_weight_magnitude(model: &ModelGraph) -> ImportanceTable {
    let mut table = ImportanceTable::new(Criterion::WeightMagnitude, provenance(model, None));
    for b in &model.blocks {
        let w = b.conv1.weight.data();
        // Row-major with filters on the leading axis: each filter is one
        // contiguous chunk.
        let per = w.len() / b.conv1.weight.dim(FILTER_AXIS);
        let filters = w
            .chunks(per)
            .map(|f| f.iter().map(|&v| (v as f64).abs()).sum())
            .collect();
        table.insert(b.id, b.is_prunable, filters);
    }
    table
}

/// Filter score: squared bn1 scale of the filter's channel.
pub fn score_bn_scale(model: &ModelGraph) -> ImportanceTable {
    let mut table = ImportanceTable::new(Criterion::BnScale, provenance(model, None));
    for b in &model.blocks {
        let filters = b
            .bn1
            .gamma
            .data()
            .iter()
            .map(|&g| (g as f64).powi(2))
            .collect();
        table.insert(b.id, b.is_prunable, filters);
    }
    table
}

/// Seeded selection of `batch_count` batches of `batch_size` samples,
/// cycling through a shuffled order when the dataset is small.
pub fn calibration_batches(
    data: &Dataset,
    spec: &CalibrationSpec,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Data("calibration data is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut cycle = order.iter().copied().cycle();
    Ok((0..spec.batch_count)
        .map(|_| {
            let idx: Vec<usize> = cycle.by_ref().take(spec.batch_size).collect();
            data.batch(&idx)
        })
        .collect())
}

/// Filter score: mean over calibration samples of the thresholded singular
/// value count of the filter's post-bn1 feature map.
pub fn score_feature_map_rank(
    model: &ModelGraph,
    data: &Dataset,
    spec: &CalibrationSpec,
) -> Result<ImportanceTable> {
    let batches = calibration_batches(data, spec)?;
    let mut sums: BTreeMap<BlockId, Vec<f64>> = model
        .blocks
        .iter()
        .map(|b| (b.id, vec![0.0; b.mid_channels]))
        .collect();
    let mut samples = 0usize;
    for (x, _) in &batches {
        let acts = model
            .infer(x, true)?
            .activations
            .expect("capture requested");
        for (id, fmap) in &acts {
            let (n, c, h, w) = fmap.dims4("feature map")?;
            if h == 0 || w == 0 {
                return Err(Error::structural(
                    format!("block {id}"),
                    "feature map smaller than 1x1",
                ));
            }
            let plane = h * w;
            let acc = sums.get_mut(id).expect("block present");
            for (idx, map) in fmap.data().chunks(plane).enumerate() {
                let m: Vec<f64> = map.iter().map(|&v| v as f64).collect();
                let r =
                    threshold_rank(h, w, &m, spec.rank_epsilon).map_err(|_| Error::Numeric {
                        layer: format!("block {id}"),
                        msg: "SVD did not converge".into(),
                    })?;
                acc[idx % c] += r as f64;
            }
            debug_assert_eq!(fmap.len(), n * c * plane);
        }
        samples += x.dim(0);
    }
    let mut table = ImportanceTable::new(Criterion::FeatureMapRank, provenance(model, Some(*spec)));
    for b in &model.blocks {
        let filters = sums[&b.id].iter().map(|s| s / samples as f64).collect();
        table.insert(b.id, b.is_prunable, filters);
    }
    Ok(table)
}

/// Filter score: `|sum(grad * weight)|` over the filter's conv1 weights,
/// taken per calibration batch and averaged over batches. Gradients come
/// from eval-mode forward passes so the model is never mutated.
pub fn score_taylor(
    model: &ModelGraph,
    data: &Dataset,
    spec: &CalibrationSpec,
) -> Result<ImportanceTable> {
    let batches = calibration_batches(data, spec)?;
    let mut sums: BTreeMap<BlockId, Vec<f64>> = model
        .blocks
        .iter()
        .map(|b| (b.id, vec![0.0; b.mid_channels]))
        .collect();
    for (x, y) in &batches {
        let (_, grads) = model.backward(x, y, Mode::Eval)?;
        for b in &model.blocks {
            let g = grads
                .get(&format!("{}.conv1.weight", b.id))
                .expect("gradient for every conv1");
            let per = b.conv1.weight.len() / b.mid_channels;
            let acc = sums.get_mut(&b.id).expect("block present");
            for (i, (wf, gf)) in b
                .conv1
                .weight
                .data()
                .chunks(per)
                .zip(g.data().chunks(per))
                .enumerate()
            {
                let dot: f64 = wf.iter().zip(gf).map(|(&w, &g)| w as f64 * g as f64).sum();
                acc[i] += dot.abs();
            }
        }
    }
    let mut table = ImportanceTable::new(Criterion::Taylor, provenance(model, Some(*spec)));
    for b in &model.blocks {
        let filters = sums[&b.id]
            .iter()
            .map(|s| s / batches.len() as f64)
            .collect();
        table.insert(b.id, b.is_prunable, filters);
    }
    Ok(table)
}

/// Scores `model` with `criterion`; data-driven criteria need `data`.
pub fn score(
    model: &ModelGraph,
    criterion: Criterion,
    data: Option<&Dataset>,
    spec: &CalibrationSpec,
) -> Result<ImportanceTable> {
    let need = || Error::Data(format!("criterion `{criterion}` needs calibration data"));
    match criterion {
        Criterion::WeightMagnitude => Ok(score_weight_magnitude(model)),
        Criterion::BnScale => Ok(score_bn_scale(model)),
        Criterion::FeatureMapRank => score_feature_map_rank(model, data.ok_or_else(need)?, spec),
        Criterion::Taylor => score_taylor(model, data.ok_or_else(need)?, spec),
    }
}

/// Prunable blocks in ascending score order; ties keep architecture order.
pub fn block_ranking(table: &ImportanceTable) -> Vec<BlockId> {
    let mut entries: Vec<(BlockId, f64)> = table
        .blocks
        .iter()
        .filter(|(_, b)| b.prunable)
        .map(|(id, b)| (*id, b.score))
        .collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    entries.into_iter().map(|(id, _)| id).collect()
}
