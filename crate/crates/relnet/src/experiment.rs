//! Seeded experiment runs, parameter sweeps, and on-disk artifacts.
//!
//! One run = (config, seed) -> per-slot trace CSV + one summary row + a
//! manifest recording the fully resolved config so the run can be replayed
//! byte-for-byte with the same binary. Sweeps rerun the config with one
//! axis modified and merge the summary rows; summaries are always
//! recomputed from the trace arrays, never accumulated separately.

use crate::analysis::{epsilon_convergence_time, run_backpressure, BackpressureOptions};
use crate::config::{ConfigError, ExperimentConfig, PolicyKind};
use crate::flowmatch::FlowMatchingPolicy;
use crate::graph::Scenario;
use crate::rcnc::{FrameRecord, RcncOptions, RcncPolicy};
use crate::sim::{
    compute_metrics, mean, reliability_targets, run_simulation, write_trace_csv, fmt_num,
    GreedyDeliveryPolicy, MetricsTrace, NumericMode, SimError, SimOptions, ZeroPolicy,
};
use crate::traffic::ArrivalSpec;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("axis {axis} cannot apply value {value}: {reason}")]
    BadAxisValue { axis: SweepAxis, value: f64, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

/// Result of one seeded run.
pub struct RunResult {
    pub seed: u64,
    pub trace: MetricsTrace,
    pub frame_log: Vec<FrameRecord>,
    /// Largest LP residual observed by the peak controller.
    pub max_lp_residual: f64,
}

/// Executes one seed of a resolved config.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult, ExperimentError> {
    let resolved = cfg.resolve()?;
    let scenario = &resolved.scenario;
    let options = SimOptions {
        capacity_mode: resolved.capacity_mode,
        numeric_mode: resolved.numeric_mode,
    };
    let horizon = cfg.horizon;
    let (trace, frame_log, max_lp_residual) = match cfg.policy {
        PolicyKind::Zero => {
            let mut p = ZeroPolicy;
            (run_simulation(scenario, &resolved.spec, &mut p, horizon, seed, &options)?, Vec::new(), 0.0)
        }
        PolicyKind::Greedy => {
            let mut p = GreedyDeliveryPolicy;
            (run_simulation(scenario, &resolved.spec, &mut p, horizon, seed, &options)?, Vec::new(), 0.0)
        }
        PolicyKind::Algorithm1 => {
            let mut p = FlowMatchingPolicy::new(
                scenario,
                cfg.v,
                resolved.numeric_mode == NumericMode::Integer,
            );
            (run_simulation(scenario, &resolved.spec, &mut p, horizon, seed, &options)?, Vec::new(), 0.0)
        }
        PolicyKind::Rcnc | PolicyKind::RcncDistributed => {
            let mut p = RcncPolicy::new(
                scenario,
                RcncOptions {
                    v: cfg.v,
                    lookahead: cfg.lookahead,
                    frame_len: cfg.frame_len,
                    kappa: cfg.kappa(),
                    distributed: cfg.policy == PolicyKind::RcncDistributed,
                },
            );
            let trace = run_simulation(scenario, &resolved.spec, &mut p, horizon, seed, &options)?;
            let residual = p.max_lp_residual;
            (trace, std::mem::take(&mut p.frame_log), residual)
        }
        PolicyKind::Backpressure => (
            run_backpressure(
                scenario,
                &resolved.spec,
                &BackpressureOptions { v: cfg.v },
                horizon,
                seed,
            )?,
            Vec::new(),
            0.0,
        ),
    };
    Ok(RunResult { seed, trace, frame_log, max_lp_residual })
}

/// One summary row per (axis value, seed, service).
pub struct SummaryRow {
    pub name: String,
    pub axis: String,
    pub axis_value: String,
    pub seed: u64,
    pub service: String,
    pub target: f64,
    pub timely_throughput: f64,
    pub reliability_ratio: f64,
    pub delivered_fraction: f64,
    pub drop_rate: f64,
    pub t_eps: Option<usize>,
    pub mean_cost: f64,
    /// Per layered edge, total over lifetimes, global deterministic order.
    pub flows: Vec<f64>,
}

pub fn flow_labels(scenario: &Scenario) -> Vec<String> {
    let mut labels = Vec::new();
    for k in 0..scenario.num_commodities() {
        for e in 0..scenario.layered[k].num_edges() {
            labels.push(format!("flow:{}", scenario.edge_label(k, e)));
        }
    }
    labels
}

pub fn summarize(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    spec: &ArrivalSpec,
    axis: &str,
    axis_value: &str,
    result: &RunResult,
) -> Vec<SummaryRow> {
    let summary = compute_metrics(scenario, spec, &result.trace);
    let targets = reliability_targets(scenario, spec);
    let mut flows = Vec::new();
    for (k, lg) in scenario.layered.iter().enumerate() {
        for e in 0..lg.num_edges() {
            flows.push((1..=lg.max_lifetime).map(|l| result.trace.mean_flow[k][lg.fidx(e, l)]).sum());
        }
    }
    (0..scenario.num_commodities())
        .map(|k| SummaryRow {
            name: cfg.name.clone(),
            axis: axis.to_string(),
            axis_value: axis_value.to_string(),
            seed: result.seed,
            service: scenario.services[k].name.clone(),
            target: targets[k],
            timely_throughput: summary.timely_throughput[k],
            reliability_ratio: summary.reliability_ratio[k],
            delivered_fraction: summary.delivered_fraction[k],
            drop_rate: summary.drop_rate[k],
            t_eps: epsilon_convergence_time(&result.trace.delivered[k], targets[k], 0.01),
            mean_cost: summary.mean_cost,
            flows: flows.clone(),
        })
        .collect()
}

pub fn write_summary_csv<W: std::io::Write>(
    rows: &[SummaryRow],
    flow_labels: &[String],
    writer: W,
) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec![
        "name", "axis", "axis_value", "seed", "service", "target", "timely_throughput",
        "reliability_ratio", "delivered_fraction", "drop_rate", "t_eps_001", "mean_cost",
    ]
    .into_iter()
    .map(str::to_string)
    .collect::<Vec<_>>();
    header.extend(flow_labels.iter().cloned());
    w.write_record(&header)?;
    for row in rows {
        let mut record = vec![
            row.name.clone(),
            row.axis.clone(),
            row.axis_value.clone(),
            row.seed.to_string(),
            row.service.clone(),
            fmt_num(row.target),
            fmt_num(row.timely_throughput),
            fmt_num(row.reliability_ratio),
            fmt_num(row.delivered_fraction),
            fmt_num(row.drop_rate),
            row.t_eps.map(|t| t.to_string()).unwrap_or_else(|| "not-reached".into()),
            fmt_num(row.mean_cost),
        ];
        record.extend(row.flows.iter().map(|v| fmt_num(*v)));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn write_frame_csv<W: std::io::Write>(
    scenario: &Scenario,
    frames: &[FrameRecord],
    writer: W,
) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["frame", "resource", "virtual_capacity", "request_growth", "eps"])?;
    for record in frames {
        for (r, resource) in scenario.resources.iter().enumerate() {
            w.write_record(&[
                record.frame.to_string(),
                resource.label.clone(),
                fmt_num(record.caps[r]),
                fmt_num(record.growth[r]),
                fmt_num(record.eps[r]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs every seed of the config, writing artifacts under `out_dir`:
/// `trace-<seed>.csv`, `frames-<seed>.csv` (peak controller only),
/// `summary.csv`, and `manifest.json`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SummaryRow>, ExperimentError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let resolved = cfg.resolve()?;
    let labels = flow_labels(&resolved.scenario);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let result = run_single(cfg, seed)?;
        let trace_path = out_dir.join(format!("trace-{seed}.csv"));
        let file = std::fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
        write_trace_csv(&resolved.scenario, &resolved.spec, &result.trace, file)?;
        if !result.frame_log.is_empty() {
            let frame_path = out_dir.join(format!("frames-{seed}.csv"));
            let file = std::fs::File::create(&frame_path).map_err(io_err(&frame_path))?;
            write_frame_csv(&resolved.scenario, &result.frame_log, file)?;
        }
        rows.extend(summarize(cfg, &resolved.scenario, &resolved.spec, "", "", &result));
    }
    let summary_path = out_dir.join("summary.csv");
    let file = std::fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    write_summary_csv(&rows, &labels, file)?;
    write_manifest(cfg, out_dir)?;
    Ok(rows)
}

fn write_manifest(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), ExperimentError> {
    let manifest = serde_json::json!({
        "tool": "relnet",
        "version": env!("CARGO_PKG_VERSION"),
        "resolved_config": cfg,
        "kappa_resolved": cfg.kappa(),
    });
    let path = out_dir.join("manifest.json");
    let mut file = std::fs::File::create(&path).map_err(io_err(&path))?;
    file.write_all(serde_json::to_string_pretty(&manifest).unwrap().as_bytes())
        .map_err(io_err(&path))?;
    file.write_all(b"\n").map_err(io_err(&path))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Cost-tradeoff parameter.
    V,
    /// Extra lifetime slots added to every service.
    DeltaL,
    /// Slot-length scaling: capacities and rates scale up, lifetimes shrink.
    SlotScale,
    /// Multiplies every declared arrival rate.
    Lambda,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepAxis::V => "v",
            SweepAxis::DeltaL => "delta-l",
            SweepAxis::SlotScale => "slot-scale",
            SweepAxis::Lambda => "lambda",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v" => Ok(SweepAxis::V),
            "delta-l" => Ok(SweepAxis::DeltaL),
            "slot-scale" => Ok(SweepAxis::SlotScale),
            "lambda" => Ok(SweepAxis::Lambda),
            other => Err(format!("unknown axis `{other}` (v, delta-l, slot-scale, lambda)")),
        }
    }
}

fn scale_rate(kind: &mut crate::traffic::ArrivalKind, factor: f64) {
    use crate::traffic::ArrivalKind::*;
    match kind {
        Poisson { rate } | UniformInt { rate } | Binomial { rate } | Constant { rate } => {
            *rate *= factor;
        }
        Trace { values, .. } => values.iter_mut().for_each(|v| *v *= factor),
    }
}

/// Applies one axis value to a copy of the config.
pub fn apply_axis(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<ExperimentConfig, ExperimentError> {
    let mut out = cfg.clone();
    let bad = |reason: &str| ExperimentError::BadAxisValue {
        axis,
        value,
        reason: reason.to_string(),
    };
    match axis {
        SweepAxis::V => {
            if value < 0.0 {
                return Err(bad("v must be >= 0"));
            }
            out.v = value;
        }
        SweepAxis::DeltaL => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(bad("delta-l must be a nonnegative integer"));
            }
            for svc in &mut out.services {
                svc.lifetime += value as usize;
            }
        }
        SweepAxis::SlotScale => {
            if value <= 0.0 {
                return Err(bad("slot-scale must be > 0"));
            }
            for link in &mut out.graph.links {
                link.capacity *= value;
            }
            for entry in &mut out.graph.compute {
                entry.capacity *= value;
            }
            for svc in &mut out.services {
                svc.lifetime = ((svc.lifetime as f64 / value).ceil() as usize).max(1);
                for arr in &mut svc.arrivals {
                    scale_rate(&mut arr.dist, value);
                    arr.lifetime = arr
                        .lifetime
                        .map(|l| ((l as f64 / value).ceil() as usize).clamp(1, svc.lifetime));
                }
            }
        }
        SweepAxis::Lambda => {
            if value < 0.0 {
                return Err(bad("lambda factor must be >= 0"));
            }
            for svc in &mut out.services {
                for arr in &mut svc.arrivals {
                    scale_rate(&mut arr.dist, value);
                }
            }
        }
    }
    out.name = format!("{}@{}={}", cfg.name, axis, value);
    Ok(out)
}

/// Runs the config once per (axis value, seed) and writes one merged
/// summary CSV; per-run artifacts land in per-value subdirectories.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SummaryRow>, ExperimentError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for &value in values {
        let modified = apply_axis(cfg, axis, value)?;
        let resolved = modified.resolve()?;
        if labels.is_empty() {
            labels = flow_labels(&resolved.scenario);
        }
        for &seed in &modified.seeds {
            let result = run_single(&modified, seed)?;
            rows.extend(summarize(
                &modified,
                &resolved.scenario,
                &resolved.spec,
                &axis.to_string(),
                &fmt_num(value),
                &result,
            ));
        }
    }
    // Flow columns can differ across delta-l values (lifetime-indexed
    // layouts); rows always aggregate per edge so labels are stable.
    let summary_path = out_dir.join("sweep-summary.csv");
    let file = std::fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    write_summary_csv(&rows, &labels, file)?;
    Ok(rows)
}

/// Mean of the slice's last half; burn-in-insensitive run statistic.
pub fn second_half_mean(xs: &[f64]) -> f64 {
    mean(&xs[xs.len() / 2..])
}
