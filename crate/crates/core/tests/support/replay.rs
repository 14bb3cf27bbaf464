//! Rebuilds parameter counts from a plan log alone.

use std::collections::BTreeMap;

use prunelab::model::{ArchitectureConfig, BlockId};
use prunelab::pruner::{parse_keep, ActionKind, PlanLog};

/// Parameter count rebuilt from a width table that only sees the log.
pub struct Replayer {
    fixed: u64,
    blocks: BTreeMap<BlockId, (u64, u64, u64)>,
}

impl Replayer {
    pub fn new(arch: &ArchitectureConfig) -> Self {
        let stem = arch.stem_width as u64;
        let last = arch.groups.last().unwrap().width as u64;
        let classes = arch.num_classes as u64;
        let fixed = 9 * arch.input_shape[0] as u64 * stem + 2 * stem + last * classes + classes;
        let mut blocks = BTreeMap::new();
        let mut cin = stem;
        for (g, spec) in arch.groups.iter().enumerate() {
            for i in 0..spec.blocks {
                let w = spec.width as u64;
                blocks.insert(BlockId::new(g, i), (cin, w, w));
                cin = w;
            }
        }
        Replayer { fixed, blocks }
    }

    pub fn params(&self) -> u64 {
        self.fixed
            + self
                .blocks
                .values()
                .map(|&(i, m, o)| 9 * i * m + 9 * m * o + 2 * m + 2 * o)
                .sum::<u64>()
    }
}

/// Replays every record of `log` on the widths of a fresh `arch` model and
/// checks each `params_after`, monotone timestamps and the final count.
pub fn check_replay(
    arch: &ArchitectureConfig,
    log: &PlanLog,
    final_params: u64,
) -> Result<(), String> {
    let mut replay = Replayer::new(arch);
    let mut last_step = 0;
    for r in &log.records {
        let missing = || format!("record names an unknown block: {r}");
        match r.kind {
            ActionKind::Shrink => {
                let keep = parse_keep(&r.detail).map_err(|e| e.to_string())?;
                let id = r.block.ok_or_else(missing)?;
                replay.blocks.get_mut(&id).ok_or_else(missing)?.1 = keep.len() as u64;
            }
            ActionKind::Remove => {
                replay
                    .blocks
                    .remove(&r.block.ok_or_else(missing)?)
                    .ok_or_else(missing)?;
            }
            ActionKind::FineTune => {}
        }
        if replay.params() != r.params_after {
            return Err(format!("replayed {} params at: {r}", replay.params()));
        }
        if r.timestamp < last_step {
            return Err(format!("timestamp goes backwards at: {r}"));
        }
        last_step = r.timestamp;
    }
    if replay.params() != final_params {
        return Err(format!(
            "replay ends at {} params, model has {final_params}",
            replay.params()
        ));
    }
    Ok(())
}
