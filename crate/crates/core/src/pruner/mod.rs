//! Iterative channel pruning, one-shot layer pruning, fine-tuning and the
//! hybrid pipeline that chains them.

mod plan;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use plan::{parse_keep, ActionKind, PlanLog, PlanRecord, PruningPlan, PLAN_LOG_HEADER};

use crate::criteria::{block_ranking, score, CalibrationSpec, Criterion, ImportanceTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{count_flops, count_params, evaluate_accuracy, MetricsRow};
use crate::model::{BlockId, ModelGraph};
use crate::optim::OptimizerState;
use crate::train::{train_epoch, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSchedule {
    /// Fraction of the initial mid channels to remove overall.
    pub target_ratio: f64,
    /// Fraction of the remaining mid channels removed per iteration.
    pub per_iteration_ratio: f64,
    pub finetune_epochs_per_iter: usize,
    pub min_channels_per_block: usize,
}

impl Default for ChannelSchedule {
    fn default() -> Self {
        ChannelSchedule {
            target_ratio: 0.3,
            per_iteration_ratio: 0.1,
            finetune_epochs_per_iter: 2,
            min_channels_per_block: 4,
        }
    }
}

impl ChannelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(Error::config(
                "channel_schedule.target_ratio",
                "must lie in [0, 1)",
            ));
        }
        if !(self.per_iteration_ratio > 0.0 && self.per_iteration_ratio < 1.0) {
            return Err(Error::config(
                "channel_schedule.per_iteration_ratio",
                "must lie in (0, 1)",
            ));
        }
        if self.target_ratio > 0.0 && self.per_iteration_ratio > self.target_ratio {
            return Err(Error::config(
                "channel_schedule.per_iteration_ratio",
                "must not exceed target_ratio",
            ));
        }
        if self.min_channels_per_block == 0 {
            return Err(Error::config(
                "channel_schedule.min_channels_per_block",
                "must be positive",
            ));
        }
        Ok(())
    }

    /// Number of channels the whole phase removes from a model with `initial` mid channels.
    pub fn target_count(&self, initial: usize) -> usize {
        (self.target_ratio * initial as f64 + 1e-9).floor() as usize
    }

    /// Channels removed in the next iteration given `remaining` channels and
    /// `removed` so far out of `target`.
    pub fn iteration_count(&self, remaining: usize, removed: usize, target: usize) -> usize {
        let k = ((self.per_iteration_ratio * remaining as f64) - 1e-9)
            .ceil()
            .max(1.0) as usize;
        k.min(target.saturating_sub(removed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseOrder {
    #[serde(rename = "cl")]
    ChannelsThenLayers,
    #[serde(rename = "lc")]
    LayersThenChannels,
}

impl PhaseOrder {
    pub fn tag(self) -> &'static str {
        match self {
            PhaseOrder::ChannelsThenLayers => "cl",
            PhaseOrder::LayersThenChannels => "lc",
        }
    }
}

impl fmt::Display for PhaseOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PhaseOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cl" | "channels-then-layers" => Ok(PhaseOrder::ChannelsThenLayers),
            "lc" | "layers-then-channels" => Ok(PhaseOrder::LayersThenChannels),
            _ => Err(Error::config(
                "order",
                format!("unknown order `{s}` (cl, lc)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub order: PhaseOrder,
    pub channel_schedule: ChannelSchedule,
    pub blocks_to_remove: usize,
    pub final_finetune_epochs: usize,
    pub criterion: Criterion,
    pub rescore_between_phases: bool,
    pub calibration: CalibrationSpec,
    /// L1 pressure on BN scales during fine-tuning, used only with the BN criterion.
    pub bn_l1_strength: f32,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            order: PhaseOrder::ChannelsThenLayers,
            channel_schedule: ChannelSchedule::default(),
            blocks_to_remove: 1,
            final_finetune_epochs: 2,
            criterion: Criterion::WeightMagnitude,
            rescore_between_phases: true,
            calibration: CalibrationSpec::default(),
            bn_l1_strength: 1e-4,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        self.channel_schedule.validate()?;
        self.calibration.validate()?;
        check_block_count(model, self.blocks_to_remove)
    }

    fn tuning(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = *base;
        cfg.optimizer.bn_l1_strength = if self.criterion == Criterion::BnScale {
            self.bn_l1_strength
        } else {
            0.0
        };
        cfg
    }
}

fn check_block_count(model: &ModelGraph, n: usize) -> Result<()> {
    let prunable = model.prunable_block_count();
    if n > prunable {
        return Err(Error::Pruning(format!(
            "cannot remove {n} blocks: only {prunable} blocks are eligible"
        )));
    }
    Ok(())
}

/// Outcome of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOutcome {
    /// Selection accuracy after each epoch, starting with the untouched model.
    pub accuracies: Vec<f64>,
    /// Index into `accuracies` of the restored snapshot.
    pub best_epoch: usize,
}

impl FineTuneOutcome {
    pub fn best_accuracy(&self) -> f64 {
        self.accuracies[self.best_epoch]
    }
}

/// Trains for `epochs` epochs and restores the snapshot with the best
/// accuracy on `val` (or `train` when no validation set is given). The
/// starting model competes as epoch 0; step and epoch counters keep the
/// values reached by training.
pub fn fine_tune(
    model: &mut ModelGraph,
    train: &Dataset,
    val: Option<&Dataset>,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<FineTuneOutcome> {
    if train.is_empty() {
        return Err(Error::Data("fine-tuning data is empty".into()));
    }
    let select = val.unwrap_or(train);
    let mut accuracies = vec![evaluate_accuracy(model, select)?];
    if epochs == 0 {
        return Ok(FineTuneOutcome {
            accuracies,
            best_epoch: 0,
        });
    }
    cfg.validate()?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut opt = OptimizerState::new(cfg.optimizer);
    for e in 1..=epochs {
        train_epoch(model, train, cfg.batch_size, cfg.seed, &mut opt)?;
        let acc = evaluate_accuracy(model, select)?;
        if acc > accuracies[best_epoch] {
            best = model.clone();
            best_epoch = e;
        }
        accuracies.push(acc);
    }
    if best_epoch != epochs {
        let (step, epoch) = (model.step, model.epoch);
        *model = best;
        model.step = step;
        model.epoch = epoch;
    }
    Ok(FineTuneOutcome {
        accuracies,
        best_epoch,
    })
}

/// Indices of the filters removed from each block by one selection round.
///
/// Filters are pooled across all blocks and taken in ascending
/// `(score, block, filter)` order, skipping any block already at `floor`.
pub fn select_channels(
    model: &ModelGraph,
    table: &ImportanceTable,
    count: usize,
    floor: usize,
) -> Result<BTreeMap<BlockId, Vec<usize>>> {
    let mut pool = Vec::new();
    for b in &model.blocks {
        let scores = table
            .blocks
            .get(&b.id)
            .ok_or_else(|| Error::Plan(format!("importance table has no entry for {}", b.id)))?;
        if scores.filters.len() != b.mid_channels {
            return Err(Error::Plan(format!(
                "importance table for {} has {} filters, block has {}",
                b.id,
                scores.filters.len(),
                b.mid_channels
            )));
        }
        pool.extend(
            scores
                .filters
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, b.id, i)),
        );
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut left: BTreeMap<BlockId, usize> = model
        .blocks
        .iter()
        .map(|b| (b.id, b.mid_channels))
        .collect();
    let mut drop: BTreeMap<BlockId, Vec<usize>> = BTreeMap::new();
    let mut taken = 0;
    for (_, id, i) in pool {
        if taken == count {
            break;
        }
        let width = left.get_mut(&id).expect("block in pool");
        if *width <= floor {
            continue;
        }
        *width -= 1;
        drop.entry(id).or_default().push(i);
        taken += 1;
    }
    if taken < count {
        return Err(Error::Pruning(format!(
            "only {taken} of {count} channels can be removed above the floor of {floor}"
        )));
    }
    for v in drop.values_mut() {
        v.sort_unstable();
    }
    Ok(drop)
}

fn keep_complement(width: usize, drop: &[usize]) -> Vec<usize> {
    (0..width)
        .filter(|i| drop.binary_search(i).is_err())
        .collect()
}

/// Most channels that can be removed without crossing `floor` in any block.
pub fn removable_channels(model: &ModelGraph, floor: usize) -> usize {
    model
        .blocks
        .iter()
        .map(|b| b.mid_channels.saturating_sub(floor))
        .sum()
}

/// Shared inputs of the pruning phases.
#[derive(Debug, Clone, Copy)]
pub struct PhaseContext<'a> {
    pub criterion: Criterion,
    pub calibration: &'a CalibrationSpec,
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub finetune: &'a TrainConfig,
}

impl PhaseContext<'_> {
    fn score(&self, model: &ModelGraph) -> Result<ImportanceTable> {
        score(model, self.criterion, Some(self.train), self.calibration)
    }

    fn tune(&self, model: &mut ModelGraph, epochs: usize, log: &mut PlanLog) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let out = fine_tune(model, self.train, self.val, epochs, self.finetune)?;
        log.record(
            model,
            ActionKind::FineTune,
            None,
            format!(
                "epochs={epochs} best_epoch={} accuracy={:.4}",
                out.best_epoch,
                out.best_accuracy()
            ),
        )
    }
}

/// Repeatedly scores, removes the globally weakest filters and fine-tunes
/// until the schedule's target is met. `first_table` is used for the first
/// iteration instead of a fresh score when given.
pub fn iterative_channel_prune(
    model: &mut ModelGraph,
    schedule: &ChannelSchedule,
    ctx: &PhaseContext<'_>,
    first_table: Option<&ImportanceTable>,
    log: &mut PlanLog,
) -> Result<usize> {
    schedule.validate()?;
    let target = schedule.target_count(model.total_mid_channels());
    let max = removable_channels(model, schedule.min_channels_per_block);
    if target > max {
        return Err(Error::Pruning(format!(
            "target of {target} channels is unreachable: at most {max} can be removed with a floor of {} per block",
            schedule.min_channels_per_block
        )));
    }
    let mut removed = 0;
    let mut iterations = 0;
    while removed < target {
        let k = schedule.iteration_count(model.total_mid_channels(), removed, target);
        let table = match first_table {
            Some(t) if iterations == 0 => t.clone(),
            _ => ctx.score(model)?,
        };
        let drop = select_channels(model, &table, k, schedule.min_channels_per_block)?;
        let plan = PruningPlan {
            channel_actions: drop
                .iter()
                .map(|(id, d)| {
                    (
                        *id,
                        keep_complement(model.block(*id).expect("selected block").mid_channels, d),
                    )
                })
                .collect(),
            layer_actions: Vec::new(),
            criterion: ctx.criterion,
            created_from: table.provenance.clone(),
        };
        plan.apply(model, log)?;
        removed += k;
        iterations += 1;
        ctx.tune(model, schedule.finetune_epochs_per_iter, log)?;
    }
    Ok(iterations)
}

/// Scores every block once, then removes the `n` lowest-ranked prunable
/// blocks in a single pass. Returns the removed ids in ranking order.
pub fn one_shot_layer_prune(
    model: &mut ModelGraph,
    n: usize,
    ctx: &PhaseContext<'_>,
    table: Option<&ImportanceTable>,
    log: &mut PlanLog,
) -> Result<Vec<BlockId>> {
    check_block_count(model, n)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let table = match table {
        Some(t) => t.clone(),
        None => ctx.score(model)?,
    };
    let victims: Vec<BlockId> = block_ranking(&table)
        .into_iter()
        .filter(|id| model.block(*id).is_some())
        .take(n)
        .collect();
    if victims.len() < n {
        return Err(Error::Pruning(format!(
            "ranking names only {} removable blocks",
            victims.len()
        )));
    }
    let plan = PruningPlan {
        channel_actions: Vec::new(),
        layer_actions: victims.clone(),
        criterion: ctx.criterion,
        created_from: table.provenance.clone(),
    };
    plan.apply(model, log)?;
    Ok(victims)
}

/// Metrics of `model` labelled `method`, with accuracy on `data`.
pub fn metrics_row(model: &ModelGraph, method: &str, data: Option<&Dataset>) -> Result<MetricsRow> {
    Ok(MetricsRow {
        method: method.to_string(),
        accuracy: data.map(|d| evaluate_accuracy(model, d)).transpose()?,
        params: count_params(model).0,
        flops: count_flops(model, model.config.input_shape)?.0,
        latency: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutcome {
    /// Baseline, each phase boundary, then the fine-tuned final model.
    pub rows: Vec<MetricsRow>,
    pub log: PlanLog,
    pub removed_blocks: Vec<BlockId>,
    pub channel_iterations: usize,
}

/// Runs both pruning phases in `config.order`, then the final fine-tune.
/// `finetune` supplies the optimizer settings used for every fine-tuning step.
pub fn run_hybrid(
    model: &mut ModelGraph,
    config: &HybridConfig,
    finetune: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<HybridOutcome> {
    config.validate(model)?;
    let tuning = config.tuning(finetune);
    let ctx = PhaseContext {
        criterion: config.criterion,
        calibration: &config.calibration,
        train,
        val,
        finetune: &tuning,
    };
    let eval = val.or(Some(train));
    let mut log = PlanLog::default();
    let mut rows = vec![metrics_row(model, "baseline", eval)?];
    let initial = if config.rescore_between_phases {
        None
    } else {
        Some(ctx.score(model)?)
    };

    let mut removed_blocks = Vec::new();
    let mut channel_iterations = 0;
    let phases = match config.order {
        PhaseOrder::ChannelsThenLayers => [Phase::Channels, Phase::Layers],
        PhaseOrder::LayersThenChannels => [Phase::Layers, Phase::Channels],
    };
    for (i, phase) in phases.into_iter().enumerate() {
        // A stale table is only usable while the architecture still matches it.
        let stale = initial
            .as_ref()
            .filter(|_| i == 0 || !config.rescore_between_phases);
        match phase {
            Phase::Channels => {
                let table = stale.filter(|t| widths_match(model, t));
                channel_iterations = iterative_channel_prune(
                    model,
                    &config.channel_schedule,
                    &ctx,
                    table,
                    &mut log,
                )?;
                rows.push(metrics_row(model, "after channel pruning", eval)?);
            }
            Phase::Layers => {
                removed_blocks =
                    one_shot_layer_prune(model, config.blocks_to_remove, &ctx, stale, &mut log)?;
                if i == 0 {
                    ctx.tune(
                        model,
                        config.channel_schedule.finetune_epochs_per_iter,
                        &mut log,
                    )?;
                }
                rows.push(metrics_row(model, "after layer pruning", eval)?);
            }
        }
    }
    ctx.tune(model, config.final_finetune_epochs, &mut log)?;
    rows.push(metrics_row(model, "final", eval)?);
    Ok(HybridOutcome {
        rows,
        log,
        removed_blocks,
        channel_iterations,
    })
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Channels,
    Layers,
}

fn widths_match(model: &ModelGraph, table: &ImportanceTable) -> bool {
    model.blocks.iter().all(|b| {
        table
            .blocks
            .get(&b.id)
            .is_some_and(|s| s.filters.len() == b.mid_channels)
    })
}
