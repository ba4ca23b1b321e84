//! Command-line interface: `run`, `timing`, `plotdata` and `serve`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use riskirl::active::Strategy;

use crate::config::{ExperimentConfig, Task};
use crate::error::{HarnessError, Result};
use crate::experiment::run_experiment;
use crate::metrics::{self, MetricsRecord};

/// Environment variable holding the log filter (`error` … `trace`).
pub const LOG_ENV: &str = "RISKIRL_LOG";

#[derive(Debug, Parser)]
#[command(name = "riskirl", version, about = "Risk-aware active inverse reinforcement learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run paired strategy trials and write metrics, timing and a summary.
    Run(ExperimentArgs),
    /// Run trials and report mean per-iteration time per strategy.
    Timing(ExperimentArgs),
    /// Turn a metrics file into per-strategy `iteration,mean,err` series.
    Plotdata(PlotArgs),
    /// Serve interactive sessions over HTTP.
    Serve(ServeArgs),
}

/// Config file plus command-line overrides; flags win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Strategies to compare; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    pub strategy: Vec<Strategy>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Queries per trial.
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    /// `metrics.jsonl` or `metrics.csv` written by `run`.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Error bar = multiplier × standard error.
    #[arg(long, default_value_t = 1.0)]
    pub multiplier: f64,
    /// Metrics to emit; all available ones by default.
    #[arg(long = "metric", value_delimiter = ',')]
    pub metric: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, env = "RISKIRL_HOST", default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, env = "RISKIRL_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Built UI bundle to serve for unmatched paths.
    #[arg(long, env = "RISKIRL_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    /// Save sessions here and restore them on start.
    #[arg(long, env = "RISKIRL_PERSIST_DIR")]
    pub persist_dir: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown strategy {s:?}"))
}

impl ExperimentArgs {
    /// The file config (or the task defaults) with flags applied, validated.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::for_task(self.task.unwrap_or(Task::GridworldAction)),
        };
        if let Some(task) = self.task {
            if self.config.is_some() && task != cfg.task {
                let strategies = cfg.strategies.clone();
                cfg.task = task;
                cfg.strategies = if task.is_placement() {
                    strategies.into_iter().filter(|s| *s != Strategy::Entropy).collect()
                } else {
                    strategies
                };
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if !self.strategy.is_empty() {
            cfg.strategies = self.strategy.clone();
        }
        if let Some(n) = self.trials {
            cfg.num_trials = n;
        }
        if let Some(q) = self.queries {
            cfg.queries_per_trial = q;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads records from JSON lines or CSV, chosen by extension.
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => metrics::read_jsonl(path),
        Some("csv") => Ok(metrics::read_metrics_csv(path)?.into_iter().map(MetricsRecord::from).collect()),
        _ => Err(HarnessError::Config(format!(
            "{}: expected a .jsonl or .csv metrics file",
            path.display()
        ))),
    }
}

fn run(args: &ExperimentArgs) -> Result<()> {
    let cfg = args.resolve()?;
    log::info!(
        "running {:?}: {} trials × {} queries, strategies {:?}, seed {}",
        cfg.task,
        cfg.num_trials,
        cfg.queries_per_trial,
        cfg.strategies,
        cfg.seed
    );
    let out = run_experiment(&cfg)?;
    let files = out.write(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), toml::to_string(&cfg).map_err(|e| HarnessError::Config(e.to_string()))?)?;
    for (trial, err) in &out.failures {
        log::warn!("trial {trial} skipped: {err}");
    }
    let summary = out.summary()?;
    if let Some(series) = summary.metrics.get("policy_loss") {
        for (strategy, points) in series {
            if let Some((i, st)) = points.iter().next_back() {
                println!("{strategy:>10}: policy loss at query {i} = {:.4} ± {:.4}", st.mean, st.stderr);
            }
        }
    }
    println!(
        "{} trials completed, {} failed; wrote {}",
        out.trials_completed,
        out.failures.len(),
        files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

fn timing(args: &ExperimentArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let out = run_experiment(&cfg)?;
    let rows = metrics::timing_table(&out.records);
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("timing.csv");
    metrics::write_timing_csv(&path, &rows)?;
    println!("{:>10} {:>10} {:>14} {:>16}", "strategy", "iterations", "select (ms)", "iteration (ms)");
    for r in &rows {
        println!(
            "{:>10} {:>10} {:>14.3} {:>16.3}",
            r.strategy, r.iterations, r.mean_select_ms, r.mean_iteration_ms
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn plotdata(args: &PlotArgs) -> Result<()> {
    let records = read_records(&args.metrics)?;
    let mut strategies: Vec<String> = records.iter().map(|r| r.strategy.clone()).collect();
    strategies.sort();
    strategies.dedup();
    let wanted: Vec<&str> = if args.metric.is_empty() {
        metrics::METRICS.to_vec()
    } else {
        args.metric.iter().map(String::as_str).collect()
    };
    let files = metrics::emit_plotdata(&records, &wanted, &strategies, args.multiplier, &args.out)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let addr = SocketAddr::new(args.host, args.port);
    let config = riskirl_session::ServiceConfig {
        static_dir: args.static_dir.clone(),
        persist_dir: args.persist_dir.clone(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(riskirl_session::serve(addr, config))?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => run(a),
        Command::Timing(a) => timing(a),
        Command::Plotdata(a) => plotdata(a),
        Command::Serve(a) => serve(a),
    }
}
