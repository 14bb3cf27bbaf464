//! Random pruning plans checked against closed-form parameter arithmetic.

use std::collections::BTreeMap;

use prunelab::criteria::{Criterion, Provenance};
use prunelab::metrics::count_params;
use prunelab::model::{build_model, ArchitectureConfig, BlockId, ModelGraph};
use prunelab::pruner::{PlanLog, PruningPlan};
use prunelab::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(in, mid, out)` widths of every block, read off the weight shapes.
pub fn widths(m: &ModelGraph) -> BTreeMap<BlockId, (u64, u64, u64)> {
    m.blocks
        .iter()
        .map(|b| {
            let w1 = b.conv1.weight.shape();
            let w2 = b.conv2.weight.shape();
            (b.id, (w1[1] as u64, w1[0] as u64, w2[0] as u64))
        })
        .collect()
}

/// Two 3x3 convs and two BNs (scale and shift each).
pub fn block_params(cin: u64, mid: u64, cout: u64) -> u64 {
    9 * cin * mid + 9 * mid * cout + 2 * mid + 2 * cout
}

pub fn preset() -> ModelGraph {
    build_model(&ArchitectureConfig::resnet56_cifar100(), 7).unwrap()
}

/// Up to four block removals plus shrinks of roughly 30% of the other blocks.
pub fn random_plan(m: &ModelGraph, seed: u64) -> PruningPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prunable: Vec<BlockId> = m
        .blocks
        .iter()
        .filter(|b| b.is_prunable)
        .map(|b| b.id)
        .collect();
    let n_remove = rng.random_range(0..=4);
    let removed: Vec<BlockId> = prunable
        .choose_multiple(&mut rng, n_remove)
        .copied()
        .collect();
    let mut channel_actions = Vec::new();
    for b in &m.blocks {
        if removed.contains(&b.id) || !rng.random_bool(0.3) {
            continue;
        }
        let mut idx: Vec<usize> = (0..b.mid_channels).collect();
        idx.shuffle(&mut rng);
        let mut keep = idx[..rng.random_range(1..=b.mid_channels)].to_vec();
        keep.sort_unstable();
        channel_actions.push((b.id, keep));
    }
    PruningPlan {
        channel_actions,
        layer_actions: removed,
        criterion: Criterion::WeightMagnitude,
        created_from: Provenance {
            model_step: 0,
            calibration: None,
        },
    }
}

/// Applies `random_plan(seed)` to a fresh preset and checks the parameter
/// delta, structural validity and a probe forward pass.
pub fn check_random_plan(seed: u64) -> Result<(), String> {
    let mut m = preset();
    let before = count_params(&m).0;
    let w = widths(&m);
    let plan = random_plan(&m, seed);

    let mut delta = 0u64;
    for (id, keep) in &plan.channel_actions {
        let (cin, mid, cout) = w[id];
        delta += block_params(cin, mid, cout) - block_params(cin, keep.len() as u64, cout);
    }
    for id in &plan.layer_actions {
        let (cin, mid, cout) = w[id];
        delta += block_params(cin, mid, cout);
    }

    plan.apply(&mut m, &mut PlanLog::default())
        .map_err(|e| format!("seed {seed}: {e}"))?;
    let after = count_params(&m).0;
    if after != before - delta {
        return Err(format!(
            "seed {seed}: {after} params, expected {}",
            before - delta
        ));
    }
    let problems = m.validate();
    if !problems.is_empty() {
        return Err(format!("seed {seed}: {problems:?}"));
    }
    let probe = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let logits = m
        .infer(&probe, false)
        .map_err(|e| format!("seed {seed}: {e}"))?
        .logits;
    if logits.shape() != [1, 100] || !logits.all_finite() {
        return Err(format!(
            "seed {seed}: bad probe logits {:?}",
            logits.shape()
        ));
    }
    Ok(())
}
