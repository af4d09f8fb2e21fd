//! Multi-source and single-source protocols over every arrangement, with
//! per-arrangement records and a flat CSV summary.

use std::fmt::Write as _;
use std::io::Write;
use std::thread;

use crate::error::{Error, Result};
use crate::harness::config::{Arrangement, ExperimentConfig};
use crate::harness::train::{evaluate, source_data, target_data, train_on, Metrics};
use crate::inference::EvalMode;
use crate::model::ModelState;
use crate::synthgen::Generator;

/// One line of the summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub arrangement: String,
    pub mode: String,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub arrangement: Arrangement,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub runs: Vec<RunRecord>,
}

impl ProtocolReport {
    /// One row per (sources, target) pair, in arrangement order.
    pub fn rows(&self) -> Vec<ResultRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.metrics.target_top1.iter().map(|&(t, top1)| ResultRow {
                    arrangement: r.arrangement.label(t),
                    mode: "full".into(),
                    top1,
                })
            })
            .collect()
    }

    /// Arithmetic mean over every (sources, target) pair.
    pub fn mean_top1(&self) -> f64 {
        let rows = self.rows();
        rows.iter().map(|r| r.top1).sum::<f64>() / rows.len().max(1) as f64
    }
}

/// Train on one arrangement's sources, then build each target's data and
/// score it under every mode. Targets are never sampled before training ends.
pub fn run_arrangement(
    cfg: &ExperimentConfig,
    arrangement: &Arrangement,
    modes: &[EvalMode],
) -> Result<(ModelState, RunRecord, Vec<ResultRow>)> {
    let gen = Generator::new(cfg.generator.clone())?;
    let data = source_data(cfg, &gen, &arrangement.sources)?;
    let (state, mut metrics) = train_on(cfg, &data)?;
    let mut rows = Vec::new();
    for &t in &arrangement.targets {
        let test = target_data(cfg, &gen, t)?;
        for (i, mode) in modes.iter().enumerate() {
            let top1 = evaluate(&state, &test, mode)?;
            if i == 0 {
                metrics.target_top1.push((t, top1));
            }
            rows.push(ResultRow {
                arrangement: arrangement.label(t),
                mode: mode.to_string(),
                top1,
            });
        }
    }
    let record = RunRecord {
        arrangement: arrangement.clone(),
        metrics,
    };
    Ok((state, record, rows))
}

/// Every arrangement of the configured protocol, trained concurrently with
/// independent state. Results are returned in arrangement order.
pub fn run_protocol(cfg: &ExperimentConfig) -> Result<ProtocolReport> {
    cfg.validate()?;
    let arrangements = cfg.arrangements()?;
    let results: Vec<Result<RunRecord>> = thread::scope(|s| {
        let handles: Vec<_> = arrangements
            .iter()
            .map(|a| s.spawn(move || run_arrangement(cfg, a, &[EvalMode::Full]).map(|r| r.1)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("training thread panicked".into()))))
            .collect()
    });
    Ok(ProtocolReport {
        runs: results.into_iter().collect::<Result<_>>()?,
    })
}

fn fmt_list(v: impl IntoIterator<Item = String>) -> String {
    format!("[{}]", v.into_iter().collect::<Vec<_>>().join(", "))
}

/// Structured-text record of one training run.
pub fn format_record(cfg: &ExperimentConfig, rec: &RunRecord) -> String {
    let m = &rec.metrics;
    let mut s = String::new();
    let targets: Vec<String> = rec.arrangement.targets.iter().map(|t| format!("d{t}")).collect();
    let _ = writeln!(s, "[run {}]", rec.arrangement.label(0).split("->").next().unwrap_or(""));
    let _ = writeln!(s, "protocol = {}", cfg.protocol);
    let _ = writeln!(s, "sources = {}", fmt_list(rec.arrangement.sources.iter().map(|d| d.to_string())));
    let _ = writeln!(s, "targets = {}", targets.join(","));
    let _ = writeln!(s, "toggles = {}", cfg.toggles);
    let _ = writeln!(s, "distance = {}", cfg.distance_kind);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "selected_epoch = {}", m.selected_epoch);
    let _ = writeln!(s, "val_top1 = {}", fmt_list(m.val_curve().iter().map(|v| format!("{v:.6}"))));
    let losses = m.epochs.iter().filter_map(|e| e.loss).map(|l| format!("{:.6}", l.total));
    let _ = writeln!(s, "train_loss = {}", fmt_list(losses));
    for (t, top1) in &m.target_top1 {
        let _ = writeln!(s, "top1.d{t} = {top1:.6}");
    }
    s
}

pub fn format_report(cfg: &ExperimentConfig, report: &ProtocolReport) -> String {
    let mut s = String::new();
    for r in &report.runs {
        s.push_str(&format_record(cfg, r));
        s.push('\n');
    }
    let _ = writeln!(s, "mean_top1 = {:.6}", report.mean_top1());
    s
}

/// CSV with header `arrangement,mode,top1`; floats at round-trip precision.
pub fn write_rows<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["arrangement", "mode", "top1"])?;
    for r in rows {
        w.write_record([r.arrangement.as_str(), r.mode.as_str(), &format!("{:?}", r.top1)])?;
    }
    w.flush()?;
    Ok(())
}
