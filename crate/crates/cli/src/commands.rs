use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mtlinear::data::{fit_normalizer, load_csv_with, SeriesFrame, Split};
use mtlinear::diagnostics::{correlation_vs_conflict_report, ConflictMode};
use mtlinear::eval::{evaluate, records_to_csv, summarize, summary_to_csv, MetricRecord, Metrics};
use mtlinear::grouping::{cluster, correlation_matrix, format_angle, grouping_report, VariateGrouping};
use mtlinear::models::Checkpoint;
use mtlinear::trainer::{grid_search, train, train_grouped, GridCell, TrainConfig, TrainOutcome};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::ConfigError;

/// Creates the output layout, refusing to reuse a non-empty directory
/// unless `force` is set.
pub fn prepare_out(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(ConfigError(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            ))
            .into());
        }
    }
    for sub in ["checkpoints", "logs", "reports"] {
        fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    Ok(())
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

pub fn load_frame(cfg: &RunConfig) -> anyhow::Result<SeriesFrame> {
    let path = cfg.dataset_path();
    if !path.is_file() {
        bail!("dataset not found: {}", path.display());
    }
    let raw = load_csv_with(&path, &cfg.date_column, cfg.split)?;
    log::info!(
        "{}: {} rows, {} variates, split {:?}",
        raw.name,
        raw.len(),
        raw.num_variates(),
        raw.split
    );
    if cfg.normalize {
        Ok(fit_normalizer(&raw)?.normalize(&raw)?)
    } else {
        Ok(raw)
    }
}

fn dataset_label(frame: &SeriesFrame) -> String {
    Path::new(&frame.name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| frame.name.clone())
}

fn record(frame: &SeriesFrame, cfg: &TrainConfig, m: &Metrics) -> MetricRecord {
    MetricRecord {
        dataset: dataset_label(frame),
        variant: cfg.variant,
        alpha_bar: cfg.alpha_bar,
        a: cfg.a,
        lookback: cfg.lookback,
        horizon: cfg.horizon,
        mse: m.mse,
        mae: m.mae,
        seed: cfg.seed,
    }
}

fn grid_csv(cells: &[GridCell], best: usize) -> String {
    let mut s = String::from("alpha_bar,alpha_label,a,groups,val_mse,selected,error\n");
    for (i, c) in cells.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.alpha_bar,
            format_angle(c.alpha_bar),
            c.a,
            c.groups.map_or(String::new(), |g| g.to_string()),
            c.val_mse.map_or(String::new(), |v| v.to_string()),
            i == best,
            c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    s
}

/// A trained model for one (horizon, seed), with its grid if one was searched.
struct Fitted {
    config: TrainConfig,
    outcome: TrainOutcome,
    val: Metrics,
    test: Metrics,
    grid: Option<(Vec<GridCell>, usize)>,
}

fn fit(frame: &SeriesFrame, cfg: &RunConfig, horizon: usize, seed: u64) -> mtlinear::Result<Fitted> {
    let base = TrainConfig {
        horizon,
        seed,
        ..cfg.train.clone()
    };
    if cfg.alpha_bar.len() * cfg.a.len() > 1 {
        let g = grid_search(frame, &base, &cfg.alpha_bar, &cfg.a)?;
        Ok(Fitted {
            config: g.best_config,
            outcome: g.outcome,
            val: g.val,
            test: g.test,
            grid: Some((g.cells, g.best)),
        })
    } else {
        let outcome = train(frame, &base)?;
        let val = evaluate(&outcome.ensemble, frame, Split::Val)?;
        let test = evaluate(&outcome.ensemble, frame, Split::Test)?;
        Ok(Fitted {
            config: base,
            outcome,
            val,
            test,
            grid: None,
        })
    }
}

#[derive(Serialize)]
struct SplitMetrics<'a> {
    val: &'a Metrics,
    test: &'a Metrics,
    diverged_heads: Vec<usize>,
}

fn write_fitted(out: &Path, tag: &str, frame: &SeriesFrame, f: &Fitted) -> anyhow::Result<()> {
    Checkpoint::from_ensemble(&f.outcome.ensemble).save(out.join("checkpoints").join(format!("{tag}.json")))?;
    write(out.join("logs").join(format!("{tag}.jsonl")), f.outcome.log_jsonl())?;
    let report = grouping_report(&f.outcome.ensemble.grouping, &frame.variate_names, &f.outcome.similarity);
    write(out.join("reports").join(format!("groups_{tag}.json")), to_json(&report))?;
    if let Some((cells, best)) = &f.grid {
        write(out.join("reports").join(format!("grid_{tag}.csv")), grid_csv(cells, *best))?;
    }
    let diverged_heads = f
        .outcome
        .heads
        .iter()
        .enumerate()
        .filter(|(_, h)| h.diverged.is_some())
        .map(|(i, _)| i)
        .collect();
    let metrics = SplitMetrics {
        val: &f.val,
        test: &f.test,
        diverged_heads,
    };
    write(out.join("reports").join(format!("metrics_{tag}.json")), to_json(&metrics))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let frame = load_frame(cfg)?;
    let f = fit(&frame, cfg, cfg.horizons[0], cfg.seeds[0])?;
    write_fitted(out, "model", &frame, &f)?;
    if f.outcome.ledger.is_some() {
        write_conflicts(out, &frame, &f.outcome)?;
    }
    let rec = record(&frame, &f.config, &f.test);
    write(out.join("results.csv"), records_to_csv(std::slice::from_ref(&rec)))?;
    println!(
        "{} {} h={} alpha_bar={} a={} groups={}: val mse {:.4}, test mse {:.4} mae {:.4}",
        rec.dataset,
        rec.variant,
        rec.horizon,
        format_angle(rec.alpha_bar),
        rec.a,
        f.outcome.ensemble.grouping.num_clusters(),
        f.val.mse,
        f.test.mse,
        f.test.mae
    );
    Ok(())
}

#[derive(Serialize)]
struct Failure {
    horizon: usize,
    seed: u64,
    error: String,
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let frame = load_frame(cfg)?;
    let cells: Vec<(usize, u64)> = cfg
        .horizons
        .iter()
        .flat_map(|&h| cfg.seeds.iter().map(move |&s| (h, s)))
        .collect();
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(h, s)| (h, s, fit(&frame, cfg, h, s)))
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (h, s, res) in results {
        match res {
            Ok(f) => {
                write_fitted(out, &format!("h{h}_seed{s}"), &frame, &f)?;
                records.push(record(&frame, &f.config, &f.test));
            }
            Err(e) => {
                log::error!("horizon {h}, seed {s} failed: {e}");
                failures.push(Failure {
                    horizon: h,
                    seed: s,
                    error: e.to_string(),
                });
            }
        }
    }
    if !failures.is_empty() {
        write(out.join("reports").join("failures.json"), to_json(&failures))?;
    }
    if records.is_empty() {
        bail!("all {} bench cells failed", failures.len());
    }
    let summary = summarize(&records);
    write(out.join("results.csv"), records_to_csv(&records))?;
    write(out.join("results.json"), to_json(&records))?;
    write(out.join("reports").join("summary.csv"), summary_to_csv(&summary))?;
    write(out.join("reports").join("summary.json"), to_json(&summary))?;

    let mut table = String::from("| dataset | variant | horizon | MSE | MAE | runs |\n|---|---|---|---|---|---|\n");
    for s in &summary {
        let h = s.horizon.map_or("avg".to_string(), |h| h.to_string());
        let _ = writeln!(
            table,
            "| {} | {} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {} |",
            s.dataset, s.variant, h, s.mse_mean, s.mse_std, s.mae_mean, s.mae_std, s.runs
        );
    }
    write(out.join("reports").join("summary.md"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct GroupCount {
    alpha_bar: f64,
    label: String,
    d_alpha: f64,
    groups: usize,
}

pub fn cmd_groups(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let frame = load_frame(cfg)?;
    let sim = correlation_matrix(&frame);
    let mut reports = Vec::new();
    let mut counts = Vec::new();
    for &alpha in &cfg.alpha_bar {
        let g = cluster(&sim, alpha)?;
        counts.push(GroupCount {
            alpha_bar: alpha,
            label: format_angle(alpha),
            d_alpha: g.d_alpha,
            groups: g.num_clusters(),
        });
        reports.push(grouping_report(&g, &frame.variate_names, &sim));
    }
    write(out.join("reports").join("groups.json"), to_json(&reports))?;
    let mut csv = String::from("alpha_bar,label,d_alpha,groups\n");
    for c in &counts {
        let _ = writeln!(csv, "{},{},{},{}", c.alpha_bar, c.label, c.d_alpha, c.groups);
    }
    write(out.join("reports").join("group_counts.csv"), &csv)?;
    println!("{}: {} variates", dataset_label(&frame), frame.num_variates());
    for c in &counts {
        println!("  alpha_bar {:>5}  groups {}", c.label, c.groups);
    }
    Ok(())
}

fn write_conflicts(out: &Path, frame: &SeriesFrame, outcome: &TrainOutcome) -> anyhow::Result<()> {
    let ledger = outcome.ledger.as_ref().context("training ran without diagnostics")?;
    let report = correlation_vs_conflict_report(ledger, &outcome.similarity, &frame.variate_names);
    write(out.join("reports").join("conflicts.csv"), report.to_csv())?;
    write(out.join("reports").join("conflicts.json"), to_json(&report))?;
    write(out.join("reports").join("conflict_matrices.json"), to_json(ledger))?;
    if let Some(trace) = &outcome.trace {
        let mut csv = String::from("variate,step,error,grad_norm\n");
        for r in &trace.records {
            let _ = writeln!(csv, "{},{},{},{}", frame.variate_names[r.variate], r.step, r.error, r.grad_norm);
        }
        write(out.join("reports").join("grad_error_trace.csv"), csv)?;
    }
    match report.rank_correlation {
        Some(rho) => println!("rank correlation between |corr| and conflicts: {rho:.4}"),
        None => println!("rank correlation between |corr| and conflicts: undefined (constant column)"),
    }
    println!("conflicts per epoch: {:?}", report.epoch_totals);
    Ok(())
}

/// Trains with conflict diagnostics. At `alpha_bar = pi/2` all variates
/// share one head regardless of their correlations.
pub fn cmd_conflicts(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let frame = load_frame(cfg)?;
    let tc = TrainConfig {
        diagnostics: Some(cfg.train.diagnostics.unwrap_or(ConflictMode::PerStep)),
        ..cfg.train.clone()
    };
    let sim = correlation_matrix(&frame);
    let grouping = if tc.alpha_bar >= FRAC_PI_2 {
        VariateGrouping::single(frame.num_variates())
    } else {
        cluster(&sim, tc.alpha_bar)?
    };
    let outcome = train_grouped(&frame, &tc, grouping, sim)?;
    let val = evaluate(&outcome.ensemble, &frame, Split::Val)?;
    let test = evaluate(&outcome.ensemble, &frame, Split::Test)?;
    let f = Fitted {
        config: tc,
        outcome,
        val,
        test,
        grid: None,
    };
    write_fitted(out, "model", &frame, &f)?;
    write(out.join("results.csv"), records_to_csv(&[record(&frame, &f.config, &f.test)]))?;
    write_conflicts(out, &frame, &f.outcome)
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split) -> anyhow::Result<()> {
    let frame = load_frame(cfg)?;
    let ensemble = Checkpoint::load(checkpoint)?.into_ensemble()?;
    if ensemble.num_variates() != frame.num_variates() {
        bail!(
            "checkpoint covers {} variates, {} has {}",
            ensemble.num_variates(),
            frame.name,
            frame.num_variates()
        );
    }
    let m = evaluate(&ensemble, &frame, split)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}
