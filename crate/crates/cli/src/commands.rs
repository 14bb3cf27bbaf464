use std::fs;
use std::path::{Path, PathBuf};

use prunelab::config::{ExperimentConfig, Splits};
use prunelab::criteria::score as score_model;
use prunelab::kernels::{set_threads, threads};
use prunelab::metrics::{evaluate_accuracy, measure_latency, LatencyReport, MetricsRow};
use prunelab::pruner::{metrics_row, run_hybrid};
use prunelab::report::{ExperimentReport, ReportEntry, TableFormat};
use prunelab::train::train as train_model;
use prunelab::{build_model, Criterion, Error, ModelGraph, PhaseOrder, Result};

use crate::artifacts::{self, DirLock, BASELINE};

#[derive(Debug, Clone)]
pub struct Options {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub criterion: Option<Criterion>,
    pub blocks: Option<usize>,
    pub order: Option<PhaseOrder>,
}

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    _lock: DirLock,
}

impl Options {
    fn open(&self) -> Result<Session> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(c) = self.criterion {
            cfg.hybrid.criterion = c;
        }
        if let Some(n) = self.blocks {
            cfg.hybrid.blocks_to_remove = n;
        }
        if let Some(o) = self.order {
            cfg.hybrid.order = o;
        }
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        let lock = DirLock::acquire(&out)?;
        Ok(Session {
            cfg,
            out,
            _lock: lock,
        })
    }

    fn checkpoint(&self, out: &Path) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| artifacts::checkpoint(out, BASELINE))
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    cfg.dataset.load(cfg.seed)
}

pub fn train(opts: &Options) -> Result<()> {
    let s = opts.open()?;
    let data = load_data(&s.cfg)?;
    let mut model = build_model(&s.cfg.architecture()?, s.cfg.seed)?;
    let log = train_model(
        &mut model,
        &data.train,
        data.val.as_ref(),
        &s.cfg.train_config(),
    )?;
    for r in &log {
        println!(
            "epoch {:>3}  loss {:.4}{}",
            r.epoch,
            r.mean_loss,
            r.val_accuracy
                .map_or(String::new(), |a| format!("  val {:.2}%", 100.0 * a))
        );
    }
    model.save(&artifacts::checkpoint(&s.out, BASELINE))?;
    let row = metrics_row(&model, "Baseline", Some(data.val_or_train()))?;
    artifacts::write_json(&artifacts::metrics(&s.out, BASELINE), &row)?;
    artifacts::write_json(&s.out.join("train_log.json"), &log)?;
    artifacts::write(&s.out.join("config.toml"), &s.cfg.to_toml())?;
    println!(
        "baseline: accuracy {:.2}%  params {}  flops {}",
        100.0 * row.accuracy.unwrap_or(0.0),
        row.params,
        row.flops
    );
    Ok(())
}

pub fn score(opts: &Options) -> Result<()> {
    let s = opts.open()?;
    let model = ModelGraph::load(&opts.checkpoint(&s.out))?;
    let criteria = match opts.criterion {
        Some(c) => vec![c],
        None => Criterion::ALL.to_vec(),
    };
    let data = if criteria.iter().any(|c| c.needs_data()) {
        Some(load_data(&s.cfg)?)
    } else {
        None
    };
    let dir = s.out.join("scores");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cal = s.cfg.hybrid_config().calibration;
    for c in criteria {
        let table = score_model(&model, c, data.as_ref().map(|d| &d.train), &cal)?;
        artifacts::write(&dir.join(format!("{}.csv", c.tag())), &table.to_csv())?;
        artifacts::write(&dir.join(format!("{}.dat", c.tag())), &table.histogram())?;
        println!("{}: {} blocks scored", c.display_name(), table.blocks.len());
    }
    Ok(())
}

pub fn prune(opts: &Options) -> Result<()> {
    let s = opts.open()?;
    let data = load_data(&s.cfg)?;
    let mut model = ModelGraph::load(&opts.checkpoint(&s.out))?;
    let hybrid = s.cfg.hybrid_config();
    let outcome = run_hybrid(
        &mut model,
        &hybrid,
        &s.cfg.finetune_config(),
        &data.train,
        data.val.as_ref(),
    )?;
    let stem = artifacts::pruned_stem(hybrid.criterion, hybrid.blocks_to_remove, hybrid.order);
    model.save(&artifacts::checkpoint(&s.out, &stem))?;
    artifacts::write(&artifacts::plan_log(&s.out, &stem), &outcome.log.render())?;
    artifacts::write_json(&artifacts::phases(&s.out, &stem), &outcome.rows)?;
    let final_row = MetricsRow {
        method: stem.clone(),
        accuracy: Some(evaluate_accuracy(&model, data.val_or_train())?),
        ..outcome.rows.last().expect("final row").clone()
    };
    let entry = ReportEntry {
        criterion: hybrid.criterion,
        blocks_removed: hybrid.blocks_to_remove,
        order: hybrid.order,
        metrics: final_row,
    };
    artifacts::write_json(&artifacts::entry(&s.out, &stem), &entry)?;
    for r in &outcome.rows {
        println!(
            "{:<22} accuracy {:>6}  params {:>9}  flops {:>11}",
            r.method,
            r.accuracy
                .map_or("-".into(), |a| format!("{:.2}%", 100.0 * a)),
            r.params,
            r.flops
        );
    }
    println!(
        "removed blocks: {:?}",
        outcome
            .removed_blocks
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
    );
    Ok(())
}

pub fn bench(opts: &Options, batch_size: usize, warmup: usize, passes: usize) -> Result<()> {
    let s = opts.open()?;
    let path = opts.checkpoint(&s.out);
    let model = ModelGraph::load(&path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config("checkpoint", format!("{} has no file name", path.display())))?
        .to_string();
    // Timings are taken single-threaded.
    let saved = threads();
    set_threads(1);
    let report = measure_latency(&model, batch_size, warmup, passes, s.cfg.seed);
    set_threads(saved);
    let report = report?;
    artifacts::write_json(&artifacts::latency(&s.out, &stem), &report)?;
    println!(
        "{stem}: {:.3} ms mean over {} passes",
        report.mean_ms,
        report.samples_ms.len()
    );
    Ok(())
}

fn optional_latency(out: &Path, stem: &str) -> Result<Option<LatencyReport>> {
    let path = artifacts::latency(out, stem);
    if path.is_file() {
        artifacts::read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn report(opts: &Options) -> Result<()> {
    let s = opts.open()?;
    let mut baseline: MetricsRow = artifacts::read_json(&artifacts::metrics(&s.out, BASELINE))?;
    baseline.latency = optional_latency(&s.out, BASELINE)?;
    let mut report = ExperimentReport::new(baseline);

    let mut names: Vec<PathBuf> = fs::read_dir(&s.out)
        .map_err(|e| Error::io(&s.out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|n| n.ends_with(".entry.json")))
        .collect();
    names.sort();
    for path in names {
        let mut entry: ReportEntry = artifacts::read_json(&path)?;
        let stem = artifacts::pruned_stem(entry.criterion, entry.blocks_removed, entry.order);
        entry.metrics.latency = optional_latency(&s.out, &stem)?;
        report.entries.push(entry);
    }
    report.check()?;

    let tables = [
        ("table1", PhaseOrder::ChannelsThenLayers, false),
        ("table2", PhaseOrder::ChannelsThenLayers, true),
        ("table3", PhaseOrder::LayersThenChannels, false),
        ("table4", PhaseOrder::LayersThenChannels, true),
    ];
    for (name, order, latency) in tables {
        for (ext, format) in [("csv", TableFormat::Csv), ("md", TableFormat::Markdown)] {
            let text = if latency {
                report.latency_table(order, format)?
            } else {
                report.accuracy_table(order, format)
            };
            artifacts::write(&s.out.join(format!("{name}.{ext}")), &text)?;
            if format == TableFormat::Markdown {
                println!("{name} ({order})\n{text}");
            }
        }
    }
    artifacts::write_json(&s.out.join("report.json"), &report)?;
    Ok(())
}
