//! Test-set metrics, horizon sweeps and baseline comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{windows, SeriesFrame, Split};
use crate::models::{HeadEnsemble, Variant};
use crate::trainer::{grid_search, train, TrainConfig};
use crate::{Error, Result};

const EVAL_CHUNK: usize = 256;

/// MSE and MAE over every window and every (horizon step, variate) cell of a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Scores `ensemble` on `split` in the frame's (normalized) units.
pub fn evaluate(ensemble: &HeadEnsemble, frame: &SeriesFrame, split: Split) -> Result<Metrics> {
    let stream = windows(frame, split, ensemble.lookback, ensemble.horizon, EVAL_CHUNK, None)?;
    let (mut se, mut ae, mut cells, mut count) = (0.0, 0.0, 0usize, 0usize);
    for batch in stream {
        let pred = ensemble.predict_batch(batch.lookbacks.view())?;
        for (p, y) in pred.iter().zip(batch.targets.iter()) {
            let r = p - y;
            se += r * r;
            ae += r.abs();
        }
        cells += pred.len();
        count += batch.len();
    }
    let mse = se / cells as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite {
            head: 0,
            what: "evaluation error",
        });
    }
    Ok(Metrics {
        mse,
        mae: ae / cells as f64,
        windows: count,
    })
}

/// One result row: a dataset, horizon and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub variant: Variant,
    pub alpha_bar: f64,
    pub a: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub seed: u64,
}

/// Mean and sample standard deviation of the per-seed results for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub dataset: String,
    pub variant: Variant,
    /// `None` for the row averaging all horizons.
    pub horizon: Option<usize>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<MetricRecord>,
    pub summary: Vec<HorizonSummary>,
}

/// Trains and tests once per `(horizon, seed)`. With more than one grid
/// cell, each run selects its own `(alpha_bar, a)` on the validation split.
pub fn horizon_sweep(
    frame: &SeriesFrame,
    base: &TrainConfig,
    horizons: &[usize],
    seeds: &[u64],
    alpha_grid: &[f64],
    a_grid: &[f64],
) -> Result<SweepResult> {
    if horizons.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one horizon and one seed".into()));
    }
    let mut records = Vec::with_capacity(horizons.len() * seeds.len());
    for &horizon in horizons {
        for &seed in seeds {
            let cfg = TrainConfig {
                horizon,
                seed,
                ..base.clone()
            };
            let (test, chosen) = if alpha_grid.len() * a_grid.len() > 1 {
                let g = grid_search(frame, &cfg, alpha_grid, a_grid)?;
                (g.test, g.best_config)
            } else {
                let cfg = TrainConfig {
                    alpha_bar: alpha_grid.first().copied().unwrap_or(cfg.alpha_bar),
                    a: a_grid.first().copied().unwrap_or(cfg.a),
                    ..cfg
                };
                let out = train(frame, &cfg)?;
                (evaluate(&out.ensemble, frame, Split::Test)?, cfg)
            };
            records.push(MetricRecord {
                dataset: frame.name.clone(),
                variant: chosen.variant,
                alpha_bar: chosen.alpha_bar,
                a: chosen.a,
                lookback: chosen.lookback,
                horizon,
                mse: test.mse,
                mae: test.mae,
                seed,
            });
        }
    }
    let summary = summarize(&records);
    Ok(SweepResult { records, summary })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-horizon mean ± std for each (dataset, variant), followed by an
/// average over that pair's horizon means.
pub fn summarize(records: &[MetricRecord]) -> Vec<HorizonSummary> {
    let mut groups: BTreeMap<(String, &'static str, usize), (Variant, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let e = groups
            .entry((r.dataset.clone(), r.variant.as_str(), r.horizon))
            .or_insert((r.variant, Vec::new(), Vec::new()));
        e.1.push(r.mse);
        e.2.push(r.mae);
    }
    let mut out: Vec<HorizonSummary> = Vec::new();
    let mut current: Option<(String, Variant)> = None;
    let flush = |out: &mut Vec<HorizonSummary>, key: &Option<(String, Variant)>| {
        let Some((ds, v)) = key else { return };
        let rows: Vec<&HorizonSummary> = out
            .iter()
            .filter(|s| &s.dataset == ds && s.variant == *v && s.horizon.is_some())
            .collect();
        let mse: Vec<f64> = rows.iter().map(|s| s.mse_mean).collect();
        let mae: Vec<f64> = rows.iter().map(|s| s.mae_mean).collect();
        let runs = rows.iter().map(|s| s.runs).sum();
        let (mse_mean, mse_std) = mean_std(&mse);
        let (mae_mean, mae_std) = mean_std(&mae);
        out.push(HorizonSummary {
            dataset: ds.clone(),
            variant: *v,
            horizon: None,
            mse_mean,
            mse_std,
            mae_mean,
            mae_std,
            runs,
        });
    };
    for ((dataset, _, horizon), (variant, mse, mae)) in groups {
        let key = Some((dataset.clone(), variant));
        if current != key {
            flush(&mut out, &current);
            current = key;
        }
        let (mse_mean, mse_std) = mean_std(&mse);
        let (mae_mean, mae_std) = mean_std(&mae);
        out.push(HorizonSummary {
            dataset,
            variant,
            horizon: Some(horizon),
            mse_mean,
            mse_std,
            mae_mean,
            mae_std,
            runs: mse.len(),
        });
    }
    flush(&mut out, &current);
    out
}

/// A published or previously measured score for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub dataset: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub dataset: String,
    pub horizon: usize,
    pub baseline_mse: f64,
    pub ours_mse: f64,
    /// Percent; `None` when the baseline is zero.
    pub mse_improvement: Option<f64>,
    pub baseline_mae: f64,
    pub ours_mae: f64,
    pub mae_improvement: Option<f64>,
}

/// `(baseline - ours) / baseline · 100`.
pub fn improvement(baseline: f64, ours: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (baseline - ours) / baseline * 100.0)
}

/// Pairs each baseline cell with the mean of our runs on it. Baseline
/// cells without any run of ours are reported as [`Error::MissingCells`].
pub fn compare_table(records: &[MetricRecord], baseline: &[BaselineEntry]) -> Result<Vec<CompareRow>> {
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for b in baseline {
        let ours: Vec<&MetricRecord> = records
            .iter()
            .filter(|r| r.dataset == b.dataset && r.horizon == b.horizon)
            .collect();
        if ours.is_empty() {
            missing.push(format!("{}/{}", b.dataset, b.horizon));
            continue;
        }
        let n = ours.len() as f64;
        let mse = ours.iter().map(|r| r.mse).sum::<f64>() / n;
        let mae = ours.iter().map(|r| r.mae).sum::<f64>() / n;
        rows.push(CompareRow {
            dataset: b.dataset.clone(),
            horizon: b.horizon,
            baseline_mse: b.mse,
            ours_mse: mse,
            mse_improvement: improvement(b.mse, mse),
            baseline_mae: b.mae,
            ours_mae: mae,
            mae_improvement: improvement(b.mae, mae),
        });
    }
    if missing.is_empty() {
        Ok(rows)
    } else {
        Err(Error::MissingCells(missing))
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |p| format!("{p:.1}%"))
}

fn table_cells(rows: &[CompareRow]) -> Vec<[String; 8]> {
    rows.iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.horizon.to_string(),
                format!("{:.3}", r.baseline_mse),
                format!("{:.3}", r.ours_mse),
                pct(r.mse_improvement),
                format!("{:.3}", r.baseline_mae),
                format!("{:.3}", r.ours_mae),
                pct(r.mae_improvement),
            ]
        })
        .collect()
}

const HEADERS: [&str; 8] = [
    "dataset",
    "horizon",
    "base_mse",
    "mse",
    "mse_impr",
    "base_mae",
    "mae",
    "mae_impr",
];

pub fn render_markdown(rows: &[CompareRow]) -> String {
    let mut s = format!("| {} |\n", HEADERS.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(HEADERS.len())));
    for cells in table_cells(rows) {
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s
}

pub fn render_text(rows: &[CompareRow]) -> String {
    let cells = table_cells(rows);
    let widths: Vec<usize> = (0..HEADERS.len())
        .map(|i| cells.iter().map(|c| c[i].len()).chain([HEADERS[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |fields: Vec<&str>| {
        fields
            .iter()
            .zip(&widths)
            .map(|(f, w)| format!("{f:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = line(HEADERS.to_vec());
    s.push('\n');
    for c in &cells {
        s.push_str(&line(c.iter().map(String::as_str).collect()));
        s.push('\n');
    }
    s
}

pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from("dataset,variant,alpha_bar,a,lookback,horizon,mse,mae,seed\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.dataset, r.variant, r.alpha_bar, r.a, r.lookback, r.horizon, r.mse, r.mae, r.seed
        );
    }
    s
}

pub fn summary_to_csv(summary: &[HorizonSummary]) -> String {
    let mut s = String::from("dataset,variant,horizon,mse_mean,mse_std,mae_mean,mae_std,runs\n");
    for r in summary {
        let horizon = r.horizon.map_or_else(|| "avg".to_string(), |h| h.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.dataset, r.variant, horizon, r.mse_mean, r.mse_std, r.mae_mean, r.mae_std, r.runs
        );
    }
    s
}
