//! Experiment runner: repetition management, paired deterministic seeding,
//! metric aggregation, and CSV emission.
//!
//! Every repetition derives its own random stream from `(seed, run_id)`, so
//! rerunning a configuration reproduces the report byte for byte, and two
//! configurations that differ only in the scheduler see the same bandwidth
//! traces, video choices, and propagation delays run for run.

pub mod config;

pub use config::{
    parse_config, parse_scheduler, BandwidthLevel, ConfigError, ExperimentConfig, Scenario,
    SchedulerKind, SelectionKind,
};

use crate::costsel::{percentile_cost, TrafficLedger};
use crate::domain::{rng_split, DetRng, Rate, RngStream, VideoSpec};
use crate::exec;
use crate::simnet::{self, SimulationTrace};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// One repetition's full outcome.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: u32,
    pub total_p95_cost: f64,
    pub link_p95: Vec<f64>,
    pub trace: SimulationTrace,
}

/// Distribution summary: interpolated quantiles plus extremes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> MetricSummary {
        assert!(!values.is_empty(), "summary of an empty sample");
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        MetricSummary {
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Linear-interpolation quantile on a sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let v = if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    v + 0.0 // normalizes -0.0
}

/// Per-run distillation used for aggregation and quick comparisons.
#[derive(Debug, Clone, Copy)]
pub struct RunSummary {
    pub run_id: u32,
    pub total_p95_cost: f64,
    pub median_stall_fraction: f64,
    pub median_skips: f64,
    /// Fraction of the run's clients that never stalled.
    pub zero_stall_fraction: f64,
    pub clients: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<RunSummary>,
    pub stall_fraction: MetricSummary,
    pub skips: MetricSummary,
    pub total_p95_cost: MetricSummary,
}

fn summarize_run(run: &RunResult) -> RunSummary {
    let stalls: Vec<f64> = run.trace.qoe.iter().map(|q| q.report.stall_fraction).collect();
    let skips: Vec<f64> = run
        .trace
        .qoe
        .iter()
        .map(|q| q.report.skipped_chunks as f64)
        .collect();
    let (median_sf, median_sk, zero_sf) = if stalls.is_empty() {
        (0.0, 0.0, 1.0)
    } else {
        let mut s = stalls.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut k = skips.clone();
        k.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let zero = stalls.iter().filter(|v| **v == 0.0).count() as f64 / stalls.len() as f64;
        (
            quantile_sorted(&s, 0.5),
            quantile_sorted(&k, 0.5),
            zero,
        )
    };
    RunSummary {
        run_id: run.run_id,
        total_p95_cost: run.total_p95_cost,
        median_stall_fraction: median_sf,
        median_skips: median_sk,
        zero_stall_fraction: zero_sf,
        clients: run.trace.qoe.len(),
    }
}

/// Runs one repetition. Public so callers can build their own repetition
/// loops (the benches compare this against the parallel runner).
pub fn run_single(cfg: &ExperimentConfig, run_id: u32) -> RunResult {
    let stream = rng_split(RngStream::new(cfg.seed, 0), run_id as u64);
    let trace = simnet::run(cfg, stream);
    let link_p95: Vec<f64> = trace
        .ledgers
        .iter()
        .map(|l| percentile_cost(l, 0.95).expect("ledgers are never empty"))
        .collect();
    RunResult {
        run_id,
        total_p95_cost: link_p95.iter().sum(),
        link_p95,
        trace,
    }
}

/// Runs all repetitions (in parallel when the `parallel` feature is on; the
/// per-run streams are disjoint, so the result is identical either way) and
/// aggregates the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let runs = exec::map_indexed(cfg.repetitions as usize, |r| run_single(cfg, r as u32));
    let summaries: Vec<RunSummary> = runs.iter().map(summarize_run).collect();
    let stall: Vec<f64> = summaries.iter().map(|s| s.median_stall_fraction).collect();
    let skips: Vec<f64> = summaries.iter().map(|s| s.median_skips).collect();
    let cost: Vec<f64> = summaries.iter().map(|s| s.total_p95_cost).collect();
    Ok(ExperimentReport {
        stall_fraction: MetricSummary::of(&stall),
        skips: MetricSummary::of(&skips),
        total_p95_cost: MetricSummary::of(&cost),
        runs,
        summaries,
    })
}

/// Samples a video duration (weights default to `1/duration`, biasing the
/// mix toward short videos) and builds its spec at the given playback rate.
pub fn video_choice(
    rng: &mut DetRng,
    durations_min: &[f64],
    weights: &[f64],
    playback_rate: Rate,
    chunk_size_bytes: u32,
) -> VideoSpec {
    assert_eq!(durations_min.len(), weights.len());
    let idx = rng.weighted_index(weights);
    let minutes = durations_min[idx];
    let chunks = (minutes * 60.0 * playback_rate.value()).round().max(1.0) as u32;
    VideoSpec::from_chunks(chunks, chunk_size_bytes, playback_rate)
}

/// Renders the per-client quality rows. Fixed six-decimal formatting keeps
/// the output byte-stable across runs.
pub fn qoe_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "run_id,client_id,stall_fraction,mean_stall_s,stall_count,skips\n",
    );
    for run in &report.runs {
        for q in &run.trace.qoe {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{}",
                run.run_id,
                q.client_id,
                q.report.stall_fraction,
                q.report.mean_stall_duration_s,
                q.report.stall_count,
                q.report.skipped_chunks
            );
        }
    }
    out
}

/// Renders the per-link billing rows.
pub fn cost_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("run_id,link_id,p95_bytes,total_p95_cost\n");
    for run in &report.runs {
        for (link_id, p95) in run.link_p95.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6}",
                run.run_id, link_id, p95, run.total_p95_cost
            );
        }
    }
    out
}

/// Renders one run's raw 5-minute ledger.
pub fn ledger_csv(ledgers: &[TrafficLedger]) -> String {
    let mut out = String::from("link_id,bucket_index,bytes\n");
    for (link_id, ledger) in ledgers.iter().enumerate() {
        for (bucket_index, bytes) in ledger.buckets().iter().enumerate() {
            let _ = writeln!(out, "{link_id},{bucket_index},{bytes}");
        }
    }
    out
}

/// Writes `qoe.csv`, `cost.csv`, and per-run `run<N>_ledger.csv` files.
pub fn emit_csv(report: &ExperimentReport, dir: &Path) -> Result<(), HarnessError> {
    let write = |name: String, contents: String| -> Result<(), HarnessError> {
        let path = dir.join(&name);
        fs::write(&path, contents).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write("qoe.csv".into(), qoe_csv(report))?;
    write("cost.csv".into(), cost_csv(report))?;
    for run in &report.runs {
        write(
            format!("run{}_ledger.csv", run.run_id),
            ledger_csv(&run.trace.ledgers),
        )?;
    }
    Ok(())
}
