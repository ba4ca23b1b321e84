//! Per-iteration metric records, their aggregates and output files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// One row per (trial, strategy, iteration).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub trial: usize,
    pub strategy: String,
    pub iteration: usize,
    /// True EVD of the learned policy over the start distribution.
    pub policy_loss: f64,
    /// Largest true per-state EVD.
    pub worst_state_loss: f64,
    pub max_var_bound: f64,
    /// State (gridworld) or candidate configuration (placement) queried to
    /// reach this iteration.
    pub queried: Option<usize>,
    pub mean_placement_error: Option<f64>,
    pub max_placement_error: Option<f64>,
    /// Realized placement loss at the queried configuration, and the bound
    /// that selected it (placement tasks).
    pub query_loss: Option<f64>,
    pub query_bound: Option<f64>,
    /// Query-selection time.
    pub select_ms: f64,
    /// Selection plus posterior update time.
    pub wall_time_ms: f64,
}

/// Columns of `metrics.csv`. Timing is left out so that the file is a pure
/// function of the configuration and seed; it goes to `timing.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub trial: usize,
    pub strategy: String,
    pub iteration: usize,
    pub policy_loss: f64,
    pub worst_state_loss: f64,
    pub max_var_bound: f64,
    pub queried: Option<usize>,
    pub mean_placement_error: Option<f64>,
    pub max_placement_error: Option<f64>,
    pub query_loss: Option<f64>,
    pub query_bound: Option<f64>,
}

impl From<&MetricsRecord> for CsvRecord {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            trial: r.trial,
            strategy: r.strategy.clone(),
            iteration: r.iteration,
            policy_loss: r.policy_loss,
            worst_state_loss: r.worst_state_loss,
            max_var_bound: r.max_var_bound,
            queried: r.queried,
            mean_placement_error: r.mean_placement_error,
            max_placement_error: r.max_placement_error,
            query_loss: r.query_loss,
            query_bound: r.query_bound,
        }
    }
}

/// Mean and standard error of one series point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { n, mean, stderr })
    }
}

/// Metrics that can be aggregated.
pub const METRICS: [&str; 6] = [
    "policy_loss",
    "worst_state_loss",
    "max_var_bound",
    "mean_placement_error",
    "max_placement_error",
    "wall_time_ms",
];

fn metric_value(r: &MetricsRecord, metric: &str) -> Result<Option<f64>> {
    Ok(match metric {
        "policy_loss" => Some(r.policy_loss),
        "worst_state_loss" => Some(r.worst_state_loss),
        "max_var_bound" => Some(r.max_var_bound),
        "mean_placement_error" => r.mean_placement_error,
        "max_placement_error" => r.max_placement_error,
        "wall_time_ms" => Some(r.wall_time_ms),
        "select_ms" => Some(r.select_ms),
        other => return Err(HarnessError::Schema(format!("unknown metric column {other:?}"))),
    })
}

/// Rejects unknown names even when there are no records to look at.
fn check_metric(metric: &str) -> Result<()> {
    metric_value(&MetricsRecord::default(), metric).map(|_| ())
}

/// `strategy → iteration → stat` for one metric.
pub type Series = BTreeMap<String, BTreeMap<usize, Stat>>;

pub fn aggregate(records: &[MetricsRecord], metric: &str) -> Result<Series> {
    check_metric(metric)?;
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records {
        if let Some(v) = metric_value(r, metric)? {
            groups
                .entry(r.strategy.clone())
                .or_default()
                .entry(r.iteration)
                .or_default()
                .push(v);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(s, iters)| {
            let stats = iters
                .into_iter()
                .filter_map(|(i, vals)| Stat::of(&vals).map(|st| (i, st)))
                .collect();
            (s, stats)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials_completed: usize,
    pub trials_failed: usize,
    /// `metric → strategy → iteration → stat`.
    pub metrics: BTreeMap<String, Series>,
}

pub fn summarize(records: &[MetricsRecord], trials_completed: usize, trials_failed: usize) -> Result<Summary> {
    let mut metrics = BTreeMap::new();
    for m in METRICS {
        let series = aggregate(records, m)?;
        if series.values().any(|s| !s.is_empty()) {
            metrics.insert(m.to_string(), series);
        }
    }
    Ok(Summary {
        trials_completed,
        trials_failed,
        metrics,
    })
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record([
        "trial",
        "strategy",
        "iteration",
        "policy_loss",
        "worst_state_loss",
        "max_var_bound",
        "queried",
        "mean_placement_error",
        "max_placement_error",
        "query_loss",
        "query_bound",
    ])?;
    for r in records {
        w.serialize(CsvRecord::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<CsvRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    for required in ["trial", "strategy", "iteration", "policy_loss"] {
        if !headers.iter().any(|h| h == required) {
            return Err(HarnessError::Schema(format!("missing column {required:?} in {}", path.display())));
        }
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Schema(e.to_string())))
        .collect()
}

/// Mean per-iteration time per strategy, ignoring the query-free iteration 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub iterations: usize,
    pub mean_select_ms: f64,
    pub mean_iteration_ms: f64,
}

pub fn timing_table(records: &[MetricsRecord]) -> Vec<TimingRow> {
    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.iteration > 0) {
        let e = groups.entry(&r.strategy).or_default();
        e.0 += 1;
        e.1 += r.select_ms;
        e.2 += r.wall_time_ms;
    }
    groups
        .into_iter()
        .map(|(s, (n, sel, wall))| TimingRow {
            strategy: s.to_string(),
            iterations: n,
            mean_select_ms: sel / n as f64,
            mean_iteration_ms: wall / n as f64,
        })
        .collect()
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["strategy", "iterations", "mean_select_ms", "mean_iteration_ms"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<metric>_<strategy>.csv` files with `iteration,mean,err` rows,
/// where `err = multiplier × stderr`. Returns the paths written.
pub fn emit_plotdata(
    records: &[MetricsRecord],
    metrics: &[&str],
    strategies: &[String],
    multiplier: f64,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &metric in metrics {
        let series = aggregate(records, metric)?;
        for strategy in strategies {
            let path = dir.join(format!("{metric}_{strategy}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["iteration", "mean", "err"])?;
            if let Some(points) = series.get(strategy) {
                for (i, st) in points {
                    w.write_record([i.to_string(), st.mean.to_string(), (multiplier * st.stderr).to_string()])?;
                }
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

impl From<CsvRecord> for MetricsRecord {
    fn from(r: CsvRecord) -> Self {
        Self {
            trial: r.trial,
            strategy: r.strategy,
            iteration: r.iteration,
            policy_loss: r.policy_loss,
            worst_state_loss: r.worst_state_loss,
            max_var_bound: r.max_var_bound,
            queried: r.queried,
            mean_placement_error: r.mean_placement_error,
            max_placement_error: r.max_placement_error,
            query_loss: r.query_loss,
            query_bound: r.query_bound,
            select_ms: 0.0,
            wall_time_ms: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(trial: usize, strategy: &str, iteration: usize, loss: f64) -> MetricsRecord {
        MetricsRecord {
            trial,
            strategy: strategy.to_string(),
            iteration,
            policy_loss: loss,
            worst_state_loss: loss,
            max_var_bound: 2.0 * loss,
            queried: None,
            mean_placement_error: None,
            max_placement_error: None,
            query_loss: None,
            query_bound: None,
            select_ms: 1.0,
            wall_time_ms: 3.0,
        }
    }

    #[test]
    fn aggregation_matches_hand_computation() {
        let losses = [1.0, 2.0, 4.0, 7.0, 1.5, 0.5, 3.0, 2.5, 6.0, 2.5];
        let records: Vec<_> = losses
            .iter()
            .enumerate()
            .map(|(i, &l)| record(i / 2, "random", i % 2, l))
            .collect();
        let series = aggregate(&records, "policy_loss").unwrap();
        // Iteration 0 holds the even-indexed losses: 1, 4, 1.5, 3, 6.
        let it0 = series["random"][&0];
        assert_eq!(it0.n, 5);
        assert!((it0.mean - 3.1).abs() < 1e-12);
        // Sample variance: (2.1² + 0.9² + 1.6² + 0.1² + 2.9²) / 4 = 4.05
        assert!((it0.stderr - (4.05f64 / 5.0).sqrt()).abs() < 1e-12);
        let it1 = series["random"][&1];
        assert!((it1.mean - 2.9).abs() < 1e-12);
    }

    #[test]
    fn constant_series_has_zero_stderr() {
        let records: Vec<_> = (0..4).map(|t| record(t, "activevar", 3, 0.25)).collect();
        let s = aggregate(&records, "policy_loss").unwrap();
        assert_eq!(s["activevar"][&3], Stat { n: 4, mean: 0.25, stderr: 0.0 });
    }

    #[test]
    fn unknown_metric_is_a_schema_error() {
        assert!(matches!(aggregate(&[], "nope"), Err(HarnessError::Schema(_))));
    }

    #[test]
    fn empty_plotdata_has_headers() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plotdata(&[], &["policy_loss"], &["random".to_string()], 0.5, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), "iteration,mean,err\n");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut recs = vec![record(0, "entropy", 0, 1.25), record(0, "entropy", 1, 0.5)];
        recs[1].queried = Some(7);
        recs[1].mean_placement_error = Some(0.1);
        write_metrics_csv(&path, &recs).unwrap();
        let back: Vec<MetricsRecord> = read_metrics_csv(&path).unwrap().into_iter().map(Into::into).collect();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].queried, Some(7));
        assert_eq!(back[1].mean_placement_error, Some(0.1));
        assert_eq!(back[0].policy_loss, 1.25);
    }

    #[test]
    fn timing_skips_iteration_zero() {
        let recs = vec![record(0, "random", 0, 1.0), record(0, "random", 1, 1.0)];
        let t = timing_table(&recs);
        assert_eq!(t[0].iterations, 1);
        assert_eq!(t[0].mean_select_ms, 1.0);
    }
}
