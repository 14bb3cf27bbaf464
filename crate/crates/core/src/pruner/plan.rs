use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::criteria::{Criterion, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{count_flops, count_params};
use crate::model::{BlockId, ModelGraph};

/// Channel shrinks and block removals to apply to one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// `(block, kept mid-channel indices)`, indices strictly increasing.
    pub channel_actions: Vec<(BlockId, Vec<usize>)>,
    pub layer_actions: Vec<BlockId>,
    pub criterion: Criterion,
    pub created_from: Provenance,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.channel_actions.is_empty() && self.layer_actions.is_empty()
    }

    /// Checks the plan against `model` without modifying it.
    pub fn check(&self, model: &ModelGraph) -> Result<()> {
        for (id, _) in &self.channel_actions {
            if self.layer_actions.contains(id) {
                return Err(Error::Plan(format!(
                    "block {id} is both shrunk and removed"
                )));
            }
        }
        for id in &self.layer_actions {
            match model.block(*id) {
                Some(b) if b.is_prunable => {}
                Some(_) => {
                    return Err(Error::Pruning(format!(
                        "block {id} not eligible for layer pruning"
                    )))
                }
                None => return Err(Error::Plan(format!("no block {id}"))),
            }
        }
        Ok(())
    }

    /// Applies every action, validating the model after each one and
    /// appending a record per action to `log`.
    pub fn apply(&self, model: &mut ModelGraph, log: &mut PlanLog) -> Result<()> {
        self.check(model)?;
        for (id, keep) in &self.channel_actions {
            let from = model.block(*id).map(|b| b.mid_channels).unwrap_or(0);
            model.shrink_channels(*id, keep)?;
            let detail = format!(
                "from={from} keep={}",
                keep.iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            log.record(model, ActionKind::Shrink, Some(*id), detail)?;
        }
        for id in &self.layer_actions {
            model.remove_block(*id)?;
            log.record(model, ActionKind::Remove, Some(*id), "-".into())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    Shrink,
    Remove,
    FineTune,
}

impl ActionKind {
    fn tag(self) -> &'static str {
        match self {
            ActionKind::Shrink => "shrink",
            ActionKind::Remove => "remove",
            ActionKind::FineTune => "finetune",
        }
    }
}

impl FromStr for ActionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shrink" => Ok(ActionKind::Shrink),
            "remove" => Ok(ActionKind::Remove),
            "finetune" => Ok(ActionKind::FineTune),
            _ => Err(Error::Plan(format!("unknown action `{s}`"))),
        }
    }
}

/// One plan-log line. `timestamp` is the model's optimizer step counter at
/// the time of the action, which keeps logs reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub timestamp: u64,
    pub kind: ActionKind,
    pub block: Option<BlockId>,
    pub detail: String,
    pub params_after: u64,
    pub flops_after: u64,
}

impl fmt::Display for PlanRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let block = self.block.map_or("-".to_string(), |b| b.to_string());
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.timestamp,
            self.kind.tag(),
            block,
            self.detail,
            self.params_after,
            self.flops_after
        )
    }
}

impl FromStr for PlanRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Plan(format!(
                "expected 6 tab-separated fields in `{line}`"
            )));
        }
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Plan(format!("bad number `{s}` in `{line}`")))
        };
        Ok(PlanRecord {
            timestamp: num(f[0])?,
            kind: f[1].parse()?,
            block: if f[2] == "-" {
                None
            } else {
                Some(f[2].parse()?)
            },
            detail: f[3].to_string(),
            params_after: num(f[4])?,
            flops_after: num(f[5])?,
        })
    }
}

/// Append-only record of every surgery and fine-tuning action.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanLog {
    pub records: Vec<PlanRecord>,
}

pub const PLAN_LOG_HEADER: &str = "# timestamp\tkind\tblock\tdetail\tparams_after\tflops_after";

impl PlanLog {
    pub fn record(
        &mut self,
        model: &ModelGraph,
        kind: ActionKind,
        block: Option<BlockId>,
        detail: String,
    ) -> Result<()> {
        let (params_after, _) = count_params(model);
        let (flops_after, _) = count_flops(model, model.config.input_shape)?;
        self.records.push(PlanRecord {
            timestamp: model.step,
            kind,
            block,
            detail,
            params_after,
            flops_after,
        });
        Ok(())
    }

    pub fn surgery(&self) -> impl Iterator<Item = &PlanRecord> {
        self.records
            .iter()
            .filter(|r| r.kind != ActionKind::FineTune)
    }

    pub fn render(&self) -> String {
        let mut out = String::from(PLAN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(PlanLog { records })
    }
}

/// Kept indices encoded in a shrink record's detail field.
pub fn parse_keep(detail: &str) -> Result<Vec<usize>> {
    let keep = detail
        .split_whitespace()
        .find_map(|t| t.strip_prefix("keep="))
        .ok_or_else(|| Error::Plan(format!("shrink detail `{detail}` lacks keep=")))?;
    keep.split(',')
        .map(|k| {
            k.parse()
                .map_err(|_| Error::Plan(format!("bad index `{k}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchitectureConfig};

    #[test]
    fn log_lines_round_trip() {
        let mut m = build_model(&ArchitectureConfig::resnet56(10), 0).unwrap();
        let plan = PruningPlan {
            channel_actions: vec![(BlockId::new(0, 1), vec![0, 3, 7])],
            layer_actions: vec![BlockId::new(2, 5)],
            criterion: Criterion::WeightMagnitude,
            created_from: Provenance {
                model_step: 0,
                calibration: None,
            },
        };
        let mut log = PlanLog::default();
        plan.apply(&mut m, &mut log).unwrap();
        log.record(&m, ActionKind::FineTune, None, "epochs=0".into())
            .unwrap();
        let text = log.render();
        assert_eq!(PlanLog::parse(&text).unwrap(), log);
        assert_eq!(parse_keep(&log.records[0].detail).unwrap(), vec![0, 3, 7]);
        assert_eq!(log.surgery().count(), 2);
    }

    #[test]
    fn conflicting_plan_rejected() {
        let m = build_model(&ArchitectureConfig::resnet56(10), 0).unwrap();
        let prov = Provenance {
            model_step: 0,
            calibration: None,
        };
        let both = PruningPlan {
            channel_actions: vec![(BlockId::new(0, 1), vec![0])],
            layer_actions: vec![BlockId::new(0, 1)],
            criterion: Criterion::BnScale,
            created_from: prov.clone(),
        };
        assert!(matches!(both.check(&m), Err(Error::Plan(_))));
        let downsample = PruningPlan {
            channel_actions: vec![],
            layer_actions: vec![BlockId::new(1, 0)],
            criterion: Criterion::BnScale,
            created_from: prov,
        };
        assert!(matches!(downsample.check(&m), Err(Error::Pruning(_))));
    }
}
