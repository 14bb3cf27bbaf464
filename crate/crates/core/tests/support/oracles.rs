//! Independent oracles for the importance criteria and one-shot removal.

use nalgebra::DMatrix;
use prunelab::criteria::{
    block_ranking, score, score_bn_scale, score_weight_magnitude, CalibrationSpec, Criterion,
    ImportanceTable, Provenance,
};
use prunelab::data::{generate_synthetic, Dataset, SyntheticDatasetSpec};
use prunelab::model::{build_model, ArchitectureConfig, BlockId, ModelGraph};
use prunelab::optim::OptimizerConfig;
use prunelab::pruner::{one_shot_layer_prune, ActionKind, PhaseContext, PlanLog};
use prunelab::svd::{singular_values, threshold_rank};
use prunelab::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;

/// Rank by Gaussian elimination with partial pivoting.
pub fn elimination_rank(rows: usize, cols: usize, data: &[f64]) -> usize {
    let mut a: Vec<Vec<f64>> = data.chunks(cols).map(|r| r.to_vec()).collect();
    let scale = data.iter().fold(0f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-9 * scale;
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() <= tol {
            continue;
        }
        a.swap(rank, pivot);
        for i in rank + 1..rows {
            let f = a[i][col] / a[rank][col];
            let (top, bottom) = a.split_at_mut(i);
            for (x, p) in bottom[0][col..].iter_mut().zip(&top[rank][col..]) {
                *x -= f * p;
            }
        }
        rank += 1;
    }
    rank
}

pub fn nalgebra_rank(rows: usize, cols: usize, data: &[f64], eps: f64) -> usize {
    DMatrix::from_row_slice(rows, cols, data)
        .singular_values()
        .iter()
        .filter(|&&s| s > eps)
        .count()
}

/// A random 8x8 map of rank at most `r`, built from integer factors so that
/// elimination sees its rank exactly.
pub fn low_rank_map(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(0..=8usize);
    let u: Vec<f64> = (0..8 * r)
        .map(|_| rng.random_range(-3..=3) as f64)
        .collect();
    let v: Vec<f64> = (0..r * 8)
        .map(|_| rng.random_range(-3..=3) as f64)
        .collect();
    (0..64)
        .map(|idx| {
            let (i, j) = (idx / 8, idx % 8);
            (0..r).map(|k| u[i * r + k] * v[k * 8 + j]).sum()
        })
        .collect()
}

/// The thresholded rank count of `low_rank_map(seed)` against nalgebra's SVD
/// and elimination, plus the singular values themselves.
pub fn check_rank(seed: u64) -> Result<(), String> {
    let m = low_rank_map(seed);
    let ours = threshold_rank(8, 8, &m, EPS).map_err(|e| format!("seed {seed}: {e:?}"))?;
    let (svd, elim) = (nalgebra_rank(8, 8, &m, EPS), elimination_rank(8, 8, &m));
    if ours != svd || ours != elim {
        return Err(format!(
            "seed {seed}: rank {ours}, nalgebra {svd}, elimination {elim}"
        ));
    }
    let sv = singular_values(8, 8, &m).map_err(|e| format!("seed {seed}: {e:?}"))?;
    let mut reference: Vec<f64> = DMatrix::from_row_slice(8, 8, &m)
        .singular_values()
        .iter()
        .copied()
        .collect();
    reference.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in sv.iter().zip(&reference) {
        if (a - b).abs() > 1e-9 * reference[0].max(1.0) {
            return Err(format!("seed {seed}: singular value {a} vs {b}"));
        }
    }
    Ok(())
}

/// Weight-magnitude and BN-scale tables against plain index loops, compared
/// bit for bit.
pub fn check_bit_exact(model: &ModelGraph) -> Result<(), String> {
    let wm = score_weight_magnitude(model);
    let bn = score_bn_scale(model);
    for b in &model.blocks {
        let s = b.conv1.weight.shape();
        let w = b.conv1.weight.data();
        let mut filters = Vec::new();
        for o in 0..s[0] {
            let mut total = 0f64;
            for i in 0..s[1] {
                for kh in 0..s[2] {
                    for kw in 0..s[3] {
                        total += (w[((o * s[1] + i) * s[2] + kh) * s[3] + kw] as f64).abs();
                    }
                }
            }
            filters.push(total);
        }
        let mean = filters.iter().sum::<f64>() / filters.len() as f64;
        if wm.blocks[&b.id].filters != filters || wm.blocks[&b.id].score.to_bits() != mean.to_bits()
        {
            return Err(format!("weight magnitude differs on {}", b.id));
        }

        let gammas: Vec<f64> = b
            .bn1
            .gamma
            .data()
            .iter()
            .map(|&g| g as f64 * g as f64)
            .collect();
        let mean = gammas.iter().sum::<f64>() / gammas.len() as f64;
        if bn.blocks[&b.id].filters != gammas || bn.blocks[&b.id].score.to_bits() != mean.to_bits()
        {
            return Err(format!("BN scale differs on {}", b.id));
        }
    }
    // Independent ranking: ascending score, shallower block first on ties.
    let mut expected: Vec<(f64, BlockId)> = model
        .blocks
        .iter()
        .filter(|b| b.is_prunable)
        .map(|b| (wm.blocks[&b.id].score, b.id))
        .collect();
    expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let expected: Vec<BlockId> = expected.into_iter().map(|(_, id)| id).collect();
    if block_ranking(&wm) != expected {
        return Err("weight magnitude ranking differs".into());
    }
    Ok(())
}

pub fn synthetic(classes: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Dataset {
    generate_synthetic(&SyntheticDatasetSpec {
        num_classes: classes,
        samples_per_class: per_class,
        image_shape: shape,
        margin: 2.0,
        seed,
    })
    .unwrap()
}

/// Largest gap between a block score and the mean of its filter scores over
/// all four criteria on the seeded preset. Scoring must leave the model
/// untouched.
pub fn block_mean_deviation() -> Result<f64, String> {
    let model = build_model(&ArchitectureConfig::resnet56_cifar100(), 1).unwrap();
    let data = synthetic(100, 1, [3, 32, 32], 3);
    let spec = CalibrationSpec {
        batch_count: 1,
        batch_size: 2,
        seed: 0,
        rank_epsilon: EPS,
    };
    let before = model.checksum();
    let mut worst = 0f64;
    for c in Criterion::ALL {
        let table = score(&model, c, Some(&data), &spec).map_err(|e| format!("{c}: {e}"))?;
        if table.blocks.len() != 27 {
            return Err(format!("{c}: {} blocks scored", table.blocks.len()));
        }
        for (id, b) in &table.blocks {
            if b.filters.len() != model.block(*id).unwrap().mid_channels
                || !b.filters.iter().all(|s| s.is_finite() && *s >= 0.0)
            {
                return Err(format!("{c}: bad filter scores on {id}"));
            }
            let mean = b.filters.iter().sum::<f64>() / b.filters.len() as f64;
            worst = worst.max((b.score - mean).abs());
        }
    }
    if model.checksum() != before {
        return Err("scoring changed the model".into());
    }
    Ok(worst)
}

fn uniform_table(model: &ModelGraph, score_of: impl Fn(BlockId) -> f64) -> ImportanceTable {
    let mut t = ImportanceTable::new(
        Criterion::WeightMagnitude,
        Provenance {
            model_step: model.step,
            calibration: None,
        },
    );
    for b in &model.blocks {
        t.insert(b.id, b.is_prunable, vec![score_of(b.id); b.mid_channels]);
    }
    t
}

/// One-shot removal on the preset: a constructed table where downsampling
/// blocks score lowest must remove exactly `g2.b5, g0.b7, g1.b1`, log them
/// in that order, and leave the downsampling blocks; without a table the
/// removed set is the bottom of the ranking computed before any removal.
pub fn check_one_shot() -> Result<(), String> {
    let train = synthetic(100, 1, [3, 32, 32], 0);
    let spec = CalibrationSpec::default();
    let ft = TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed: 0,
        optimizer: OptimizerConfig::default(),
    };
    let ctx = PhaseContext {
        criterion: Criterion::WeightMagnitude,
        calibration: &spec,
        train: &train,
        val: None,
        finetune: &ft,
    };

    let mut model = build_model(&ArchitectureConfig::resnet56_cifar100(), 0).unwrap();
    let table = uniform_table(&model, |id| match (id.group, id.index) {
        (g, 0) if g > 0 => 0.0,
        (2, 5) => 1.0,
        (0, 7) => 2.0,
        (1, 1) => 3.0,
        (g, i) => 10.0 + g as f64 + i as f64 / 100.0,
    });
    let mut log = PlanLog::default();
    let removed = one_shot_layer_prune(&mut model, 3, &ctx, Some(&table), &mut log)
        .map_err(|e| e.to_string())?;
    let expected = vec![BlockId::new(2, 5), BlockId::new(0, 7), BlockId::new(1, 1)];
    if removed != expected {
        return Err(format!("removed {removed:?}, expected {expected:?}"));
    }
    if model.block(BlockId::new(1, 0)).is_none() || model.block(BlockId::new(2, 0)).is_none() {
        return Err("a downsampling block was removed".into());
    }
    let logged: Vec<Option<BlockId>> = log.records.iter().map(|r| r.block).collect();
    if logged != expected.iter().copied().map(Some).collect::<Vec<_>>()
        || log.records.iter().any(|r| r.kind != ActionKind::Remove)
    {
        return Err(format!(
            "log does not match a single pass: {}",
            log.render()
        ));
    }

    let mut model = build_model(&ArchitectureConfig::resnet56_cifar100(), 9).unwrap();
    let expected: Vec<BlockId> = block_ranking(&score_weight_magnitude(&model))
        .into_iter()
        .take(5)
        .collect();
    let removed = one_shot_layer_prune(&mut model, 5, &ctx, None, &mut PlanLog::default())
        .map_err(|e| e.to_string())?;
    if removed != expected {
        return Err(format!(
            "removed {removed:?}, pre-pruning bottom five {expected:?}"
        ));
    }
    Ok(())
}
