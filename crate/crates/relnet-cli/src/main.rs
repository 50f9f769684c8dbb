//! Command-line experiment harness.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use relnet::analysis::{min_cost_flow_lp, stability_margin_lp, StabilityMargin};
use relnet::config::{load_config, ConfigError, ExperimentConfig};
use relnet::experiment::{self, ExperimentError, SweepAxis};
use relnet::sim::fmt_num;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "relnet", version, about = "Deadline-constrained network control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory; defaults to `out/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's horizon in slots.
    #[arg(long)]
    slots: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write traces + summary + manifest.
    Run(CommonArgs),
    /// Rerun a config along one axis and write a merged summary.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Axis to vary: v | delta-l | slot-scale | lambda.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Solve the stability-margin and min-cost oracles for a config.
    Analyze(CommonArgs),
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = load_config(&common.config)?;
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    if let Some(slots) = common.slots {
        cfg.horizon = slots;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &CommonArgs, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name))
}

fn analyze(cfg: &ExperimentConfig, dir: &PathBuf) -> anyhow::Result<()> {
    let resolved = cfg.resolve()?;
    let rates = resolved.spec.rate_matrix(&resolved.scenario);
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("analysis.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)?;
    w.write_record(["quantity", "commodity", "edge", "value"])?;

    match stability_margin_lp(&resolved.scenario, &rates)? {
        StabilityMargin::Bounded { theta, .. } => {
            w.write_record(["stability_margin", "", "", &fmt_num(theta)])?;
            println!("stability margin theta* = {theta:.6}");
        }
        StabilityMargin::Unbounded => {
            w.write_record(["stability_margin", "", "", "unbounded"])?;
            println!("stability margin theta* unbounded (vacuous reliability target)");
        }
    }
    match min_cost_flow_lp(&resolved.scenario, &rates) {
        Ok(result) => {
            w.write_record(["min_cost", "", "", &fmt_num(result.cost)])?;
            println!("min-cost objective h* = {:.6}", result.cost);
            for (k, lg) in resolved.scenario.layered.iter().enumerate() {
                for e in 0..lg.num_edges() {
                    let total: f64 =
                        (1..=lg.max_lifetime).map(|l| result.flows[k][lg.fidx(e, l)]).sum();
                    if total > 1e-9 {
                        w.write_record([
                            "flow",
                            &resolved.scenario.services[k].name,
                            &resolved.scenario.edge_label(k, e),
                            &fmt_num(total),
                        ])?;
                    }
                }
            }
        }
        Err(relnet::analysis::AnalysisError::Infeasible) => {
            w.write_record(["min_cost", "", "", "infeasible"])?;
            println!("offered load is outside the stability region");
        }
        Err(e) => return Err(e.into()),
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let dir = out_dir(&common, &cfg);
            let rows = experiment::run_experiment(&cfg, &dir)?;
            for row in &rows {
                println!(
                    "seed {} service {}: throughput {:.4} (target {:.4}), cost {:.4}, t_eps {}",
                    row.seed,
                    row.service,
                    row.timely_throughput,
                    row.target,
                    row.mean_cost,
                    row.t_eps.map(|t| t.to_string()).unwrap_or_else(|| "not-reached".into()),
                );
            }
            println!("artifacts in {}", dir.display());
            Ok(())
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let dir = out_dir(&common, &cfg);
            let rows = experiment::sweep(&cfg, axis, &values, &dir)?;
            println!("{} summary rows in {}", rows.len(), dir.display());
            Ok(())
        }
        Command::Analyze(common) => {
            let cfg = load(&common)?;
            let dir = out_dir(&common, &cfg);
            analyze(&cfg, &dir)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err.downcast_ref::<ConfigError>().is_some()
                || matches!(
                    err.downcast_ref::<ExperimentError>(),
                    Some(ExperimentError::Config(_))
                );
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
