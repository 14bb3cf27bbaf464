//! Result tables: accuracy and complexity (Method, Accuracy, Parameters,
//! FLOPs) and latency (Method, Latency, Latency Reduction), one pair per
//! phase order.

use serde::{Deserialize, Serialize};

use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::metrics::{reduction_summary, MetricsRow, FLOPS_CONVENTION};
use crate::pruner::PhaseOrder;

/// Metrics of one pruned model together with how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub criterion: Criterion,
    pub blocks_removed: usize,
    pub order: PhaseOrder,
    pub metrics: MetricsRow,
}

/// Row label such as `Weight Magnitude (2 blocks)`.
pub fn method_name(criterion: Criterion, blocks: usize) -> String {
    let unit = if blocks == 1 { "block" } else { "blocks" };
    format!("{} ({blocks} {unit})", criterion.display_name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub baseline: MetricsRow,
    pub entries: Vec<ReportEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn render(format: TableFormat, header: &[&str], rows: &[Vec<String>]) -> String {
    match format {
        TableFormat::Csv => {
            let mut out = format!("# FLOPs: {FLOPS_CONVENTION}\n{}\n", header.join(","));
            for r in rows {
                out.push_str(&r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
            out
        }
        TableFormat::Markdown => {
            let widths: Vec<usize> = (0..header.len())
                .map(|i| {
                    rows.iter()
                        .map(|r| r[i].len())
                        .chain([header[i].len(), 3])
                        .max()
                        .unwrap_or(3)
                })
                .collect();
            let line = |cells: Vec<String>| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, &w)| format!("{c:<w$}"))
                    .collect();
                format!("| {} |\n", padded.join(" | "))
            };
            let mut out = format!("FLOPs: {FLOPS_CONVENTION}\n\n");
            out.push_str(&line(header.iter().map(|h| h.to_string()).collect()));
            out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect()));
            for r in rows {
                out.push_str(&line(r.clone()));
            }
            out
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ExperimentReport {
    pub fn new(baseline: MetricsRow) -> Self {
        ExperimentReport {
            baseline,
            entries: Vec::new(),
        }
    }

    /// Entries for `order`, sorted by criterion then removed-block count.
    pub fn rows_for(&self, order: PhaseOrder) -> Vec<&ReportEntry> {
        let mut rows: Vec<&ReportEntry> =
            self.entries.iter().filter(|e| e.order == order).collect();
        rows.sort_by_key(|e| (e.criterion, e.blocks_removed));
        rows
    }

    /// Columns Method, Accuracy, Parameters, FLOPs; accuracy in percent.
    pub fn accuracy_table(&self, order: PhaseOrder, format: TableFormat) -> String {
        let row = |method: String, m: &MetricsRow| {
            let params = match format {
                TableFormat::Csv => m.params.to_string(),
                TableFormat::Markdown => group_thousands(m.params),
            };
            let flops = match format {
                TableFormat::Csv => m.flops.to_string(),
                TableFormat::Markdown => group_thousands(m.flops),
            };
            vec![
                method,
                m.accuracy
                    .map_or(String::new(), |a| format!("{:.2}", 100.0 * a)),
                params,
                flops,
            ]
        };
        let mut rows = vec![row(self.baseline.method.clone(), &self.baseline)];
        rows.extend(
            self.rows_for(order)
                .into_iter()
                .map(|e| row(method_name(e.criterion, e.blocks_removed), &e.metrics)),
        );
        render(
            format,
            &["Method", "Accuracy", "Parameters", "FLOPs"],
            &rows,
        )
    }

    /// Columns Method, Latency (ms), Latency Reduction (percent vs. baseline).
    pub fn latency_table(&self, order: PhaseOrder, format: TableFormat) -> Result<String> {
        let unit = |v: String, u: &str| match format {
            TableFormat::Csv => v,
            TableFormat::Markdown => format!("{v} {u}"),
        };
        let latency = |m: &MetricsRow| {
            m.latency
                .as_ref()
                .map_or(String::new(), |l| unit(format!("{:.3}", l.mean_ms), "ms"))
        };
        let mut rows = vec![vec![
            self.baseline.method.clone(),
            latency(&self.baseline),
            String::new(),
        ]];
        for e in self.rows_for(order) {
            let reduction = match (&self.baseline.latency, &e.metrics.latency) {
                (Some(_), Some(_)) => reduction_summary(&self.baseline, &e.metrics)?
                    .latency_reduction_pct
                    .map_or(String::new(), |r| unit(format!("{r:.2}"), "%")),
                _ => String::new(),
            };
            rows.push(vec![
                method_name(e.criterion, e.blocks_removed),
                latency(&e.metrics),
                reduction,
            ]);
        }
        Ok(render(
            format,
            &["Method", "Latency", "Latency Reduction"],
            &rows,
        ))
    }

    /// Rejects entries whose latency was measured under a different protocol
    /// from the baseline's.
    pub fn check(&self) -> Result<()> {
        for e in &self.entries {
            if let (Some(b), Some(p)) = (&self.baseline.latency, &e.metrics.latency) {
                if !b.same_protocol(p) {
                    return Err(Error::Report(format!(
                        "{} was timed with a different protocol from the baseline",
                        method_name(e.criterion, e.blocks_removed)
                    )));
                }
            }
        }
        Ok(())
    }
}
