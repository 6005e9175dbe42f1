//! Per-head training with early stopping, and the grid search over the
//! grouping threshold and penalty exponent.
//!
//! Every head owns its RNG streams, its window iterator and its optimizer
//! state, so training heads one after another or on a thread pool gives
//! bitwise-identical weights.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{windows, SeriesFrame, Split, WindowBatch};
use crate::diagnostics::{count_conflicts, ConflictLedger, ConflictMode, GradErrorTrace, TraceRecord};
use crate::eval::{evaluate, Metrics};
use crate::grouping::{cluster, correlation_matrix, SimilarityMatrix, VariateGrouping};
use crate::loss::{penalty_weights, ErrorMatrix, PenaltyWeights, Residuals};
use crate::models::{init_head, HeadEnsemble, LinearHead, Variant, DEFAULT_MA_KERNEL};
use crate::optim::{AdamParams, OptimState, OptimizerKind};
use crate::{Error, Result};

/// Windows per chunk when scoring a split.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Halve the learning rate after every epoch.
    Halving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lookback: usize,
    pub horizon: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Penalty exponent; 0 disables the penalty.
    pub a: f64,
    /// Grouping threshold in radians.
    pub alpha_bar: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub ma_kernel: usize,
    pub bias: bool,
    pub lr_schedule: LrSchedule,
    /// When set, the penalty uses an exponential moving average of the error
    /// matrix with this decay instead of the current batch's errors.
    pub error_ema: Option<f64>,
    pub diagnostics: Option<ConflictMode>,
    /// Train heads on the current rayon pool instead of sequentially.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::NLinear,
            lookback: 96,
            horizon: 96,
            lr: 0.01,
            batch: 32,
            max_epochs: 20,
            patience: 3,
            a: 1.0,
            alpha_bar: std::f64::consts::FRAC_PI_4,
            seed: 2021,
            optimizer: OptimizerKind::Adam,
            adam: AdamParams::default(),
            ma_kernel: DEFAULT_MA_KERNEL,
            bias: true,
            lr_schedule: LrSchedule::Constant,
            error_ema: None,
            diagnostics: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be a finite positive number, got {}", self.lr));
        }
        if self.batch < 1 || self.patience < 1 {
            return fail(format!("batch ({}) and patience ({}) must be at least 1", self.batch, self.patience));
        }
        if self.lookback < 1 || self.horizon < 1 {
            return fail("lookback and horizon must be at least 1".into());
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return fail(format!("penalty exponent must be >= 0, got {}", self.a));
        }
        if self.ma_kernel.is_multiple_of(2) {
            return fail(format!("moving-average kernel must be odd, got {}", self.ma_kernel));
        }
        if let Some(beta) = self.error_ema {
            if !(0.0..1.0).contains(&beta) {
                return fail(format!("error_ema must lie in [0, 1), got {beta}"));
            }
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for stream `purpose` of head `head` under base seed `seed`.
pub fn derive_seed(seed: u64, head: usize, purpose: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ head as u64) ^ purpose)
}

/// Mutable training state of one head.
#[derive(Debug, Clone)]
pub struct HeadState {
    pub optim: OptimState,
    pub lr_scale: f64,
    pub steps: usize,
    pub ema_error: Option<Array2<f64>>,
    pub best_val: f64,
    pub best_epoch: Option<usize>,
    pub best_weights: Vec<Array2<f64>>,
    pub since_improvement: usize,
    pub stopped: bool,
}

impl HeadState {
    pub fn new(head: &LinearHead, config: &TrainConfig) -> Self {
        HeadState {
            optim: OptimState::new(config.optimizer, config.adam, &head.weights),
            lr_scale: 1.0,
            steps: 0,
            ema_error: None,
            best_val: f64::INFINITY,
            best_epoch: None,
            best_weights: head.weights.clone(),
            since_improvement: 0,
            stopped: false,
        }
    }

    /// Records a validation score; returns true when the head should stop.
    pub fn observe_validation(&mut self, epoch: usize, val_mse: f64, weights: &[Array2<f64>], patience: usize) -> bool {
        if val_mse < self.best_val {
            self.best_val = val_mse;
            self.best_epoch = Some(epoch);
            self.best_weights = weights.to_vec();
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= patience {
                self.stopped = true;
            }
        }
        self.stopped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: f64,
    pub grad_norm: f64,
    pub error_mean: f64,
    pub error_max: f64,
}

/// One optimizer update of `head` on `batch` (already restricted to the
/// head's variates) with the error-scaled weighted loss.
pub fn train_step(
    head: &mut LinearHead,
    batch: &WindowBatch,
    config: &TrainConfig,
    state: &mut HeadState,
) -> Result<StepRecord> {
    step_observed(head, batch, config, state, None)
}

type Observer<'a> = &'a mut dyn FnMut(&Residuals, &PenaltyWeights) -> Result<()>;

fn step_observed(
    head: &mut LinearHead,
    batch: &WindowBatch,
    config: &TrainConfig,
    state: &mut HeadState,
    observer: Option<Observer<'_>>,
) -> Result<StepRecord> {
    if state.stopped {
        return Err(Error::Config(format!("head {} has already stopped", head.id)));
    }
    let res = Residuals::compute(head, batch)?;
    let mut errors = res.error_matrix();
    if let Some(beta) = config.error_ema {
        if let Some(prev) = &state.ema_error {
            errors.e = prev * beta + &errors.e * (1.0 - beta);
        }
        state.ema_error = Some(errors.e.clone());
    }
    let weights = penalty_weights(&errors, config.a);
    let loss = res.loss(&weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { head: head.id, what: "loss" });
    }
    let grads = res.gradient(&weights)?;
    let grad_norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { head: head.id, what: "gradient" });
    }
    if let Some(obs) = observer {
        obs(&res, &weights)?;
    }
    state.optim.apply(&mut head.weights, &grads, config.lr * state.lr_scale);
    state.steps += 1;
    Ok(StepRecord {
        loss,
        grad_norm,
        error_mean: errors.e.mean().unwrap_or(0.0),
        error_max: errors.e.iter().copied().fold(0.0, f64::max),
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub head: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
    pub grad_norm: f64,
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct HeadOutcome {
    pub head: LinearHead,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub diverged: Option<String>,
    pub ledger: Option<ConflictLedger>,
    pub trace: Option<GradErrorTrace>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ensemble: HeadEnsemble,
    pub similarity: SimilarityMatrix,
    /// Sorted by epoch, then head.
    pub log: Vec<EpochRecord>,
    pub heads: Vec<HeadOutcome>,
    pub ledger: Option<ConflictLedger>,
    pub trace: Option<GradErrorTrace>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("log record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Groups the variates on the train split, then fits one head per cluster.
pub fn train(frame: &SeriesFrame, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let similarity = correlation_matrix(frame);
    let grouping = cluster(&similarity, config.alpha_bar)?;
    train_grouped(frame, config, grouping, similarity)
}

/// Fits one head per cluster of a given grouping.
pub fn train_grouped(
    frame: &SeriesFrame,
    config: &TrainConfig,
    grouping: VariateGrouping,
    similarity: SimilarityMatrix,
) -> Result<TrainOutcome> {
    config.validate()?;
    grouping.validate(frame.num_variates())?;
    for split in [Split::Train, Split::Val] {
        windows(frame, split, config.lookback, config.horizon, config.batch, None)?;
    }
    let k = frame.num_variates();
    let fit = |(id, cols): (usize, &Vec<usize>)| train_head(frame, config, id, cols, k);
    let heads: Vec<HeadOutcome> = if config.parallel {
        grouping.clusters.par_iter().enumerate().map(fit).collect::<Result<_>>()?
    } else {
        grouping.clusters.iter().enumerate().map(fit).collect::<Result<_>>()?
    };

    let mut log: Vec<EpochRecord> = heads.iter().flat_map(|h| h.log.iter().cloned()).collect();
    log.sort_by_key(|r| (r.epoch, r.head));
    let ledger = heads
        .iter()
        .filter_map(|h| h.ledger.clone())
        .reduce(|mut a, b| {
            a.merge(&b);
            a
        });
    let trace = heads
        .iter()
        .filter_map(|h| h.trace.clone())
        .reduce(|mut a, b| {
            a.records.extend(b.records);
            a
        });
    let ensemble = HeadEnsemble::new(heads.iter().map(|h| h.head.clone()).collect(), grouping)?;
    Ok(TrainOutcome {
        ensemble,
        similarity,
        log,
        heads,
        ledger,
        trace,
    })
}

/// Plain MSE of `head` over every window of `split`, restricted to `cols`.
pub fn split_mse(head: &LinearHead, frame: &SeriesFrame, split: Split, cols: &[usize]) -> Result<f64> {
    let stream = windows(frame, split, head.lookback, head.horizon, EVAL_CHUNK, None)?.with_columns(cols);
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in stream {
        let res = Residuals::compute(head, &batch)?;
        total += res.residual.iter().map(|r| r * r).sum::<f64>();
        count += res.residual.len();
    }
    Ok(total / count as f64)
}

fn probe_batch(frame: &SeriesFrame, config: &TrainConfig, cols: &[usize]) -> Result<WindowBatch> {
    let mut stream = windows(frame, Split::Train, config.lookback, config.horizon, config.batch, None)?
        .with_columns(cols);
    stream.next().ok_or_else(|| Error::Split("train split has no windows".into()))
}

struct Instruments<'c> {
    cols: &'c [usize],
    ledger: ConflictLedger,
    trace: GradErrorTrace,
}

impl Instruments<'_> {
    fn record(&mut self, step: usize, res: &Residuals, w: &PenaltyWeights) -> Result<()> {
        let grads = res.per_variate_gradients(w)?;
        let conflicts = count_conflicts(&grads);
        self.ledger.record(&conflicts, self.cols);
        let errors: ErrorMatrix = res.error_matrix();
        for (i, g) in grads.iter().enumerate() {
            let err = errors.e.row(i).mean().unwrap_or(0.0);
            self.trace.records.push(TraceRecord {
                variate: self.cols[i],
                step,
                error: err,
                grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
        Ok(())
    }
}

fn train_head(frame: &SeriesFrame, config: &TrainConfig, id: usize, cols: &[usize], k: usize) -> Result<HeadOutcome> {
    let mut head = init_head(config.variant, config.lookback, config.horizon, derive_seed(config.seed, id, 0))?;
    head.id = id;
    head.ma_kernel = config.ma_kernel;
    head.bias = config.bias;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, id, 1));
    let mut state = HeadState::new(&head, config);
    let mut log = Vec::new();
    let mut diverged = None;
    let mut instruments = config.diagnostics.map(|_| Instruments {
        cols,
        ledger: ConflictLedger::new(k),
        trace: GradErrorTrace::default(),
    });
    let probe = match config.diagnostics {
        Some(ConflictMode::ProbeEpoch) => Some(probe_batch(frame, config, cols)?),
        _ => None,
    };

    for epoch in 1..=config.max_epochs {
        let epoch_seed: u64 = shuffle_rng.gen();
        if let Some(ins) = instruments.as_mut() {
            ins.ledger.begin_epoch();
        }
        let stream = windows(frame, Split::Train, config.lookback, config.horizon, config.batch, Some(epoch_seed))?
            .with_columns(cols);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in stream {
            let step_no = state.steps;
            let result = match (config.diagnostics, instruments.as_mut()) {
                (Some(ConflictMode::PerStep), Some(ins)) => {
                    let mut obs = |res: &Residuals, w: &PenaltyWeights| ins.record(step_no, res, w);
                    step_observed(&mut head, &batch, config, &mut state, Some(&mut obs))
                }
                _ => train_step(&mut head, &batch, config, &mut state),
            };
            match result {
                Ok(rec) => {
                    loss_sum += rec.loss;
                    norm_sum += rec.grad_norm;
                    steps += 1;
                }
                Err(Error::NonFinite { what, .. }) => {
                    diverged = Some(format!("non-finite {what} at epoch {epoch}, step {step_no}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let steps_f = steps.max(1) as f64;
        if diverged.is_none() {
            if let (Some(probe), Some(ins)) = (&probe, instruments.as_mut()) {
                let res = Residuals::compute(&head, probe);
                match res {
                    Ok(res) => {
                        let w = penalty_weights(&res.error_matrix(), config.a);
                        ins.record(state.steps, &res, &w)?;
                    }
                    Err(Error::NonFinite { what, .. }) => {
                        diverged = Some(format!("non-finite {what} on the probe batch at epoch {epoch}"))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let val = if diverged.is_none() {
            match split_mse(&head, frame, Split::Val, cols) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    diverged = Some(format!("non-finite validation error at epoch {epoch}"));
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let stop = match val {
            Some(v) => state.observe_validation(epoch, v, &head.weights, config.patience),
            None => {
                state.stopped = true;
                true
            }
        };
        log.push(EpochRecord {
            epoch,
            head: id,
            train_loss: loss_sum / steps_f,
            val_mse: val,
            grad_norm: norm_sum / steps_f,
            stopped: stop,
        });
        if stop {
            break;
        }
        if config.lr_schedule == LrSchedule::Halving {
            state.lr_scale *= 0.5;
        }
    }
    if let Some(msg) = &diverged {
        log::warn!("head {id} diverged: {msg}; keeping its best snapshot");
    }
    head.weights = state.best_weights.clone();
    Ok(HeadOutcome {
        head,
        log,
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        diverged,
        ledger: instruments.as_ref().map(|i| i.ledger.clone()),
        trace: instruments.map(|i| i.trace),
    })
}

/// One `(alpha_bar, a)` cell of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha_bar: f64,
    pub a: f64,
    pub groups: Option<usize>,
    pub val_mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
    pub best_config: TrainConfig,
    pub outcome: TrainOutcome,
    pub val: Metrics,
    pub test: Metrics,
}

/// Trains every `(alpha_bar, a)` combination and keeps the one with the
/// lowest validation MSE. Ties go to the smaller `a`, then the larger
/// `alpha_bar`.
pub fn grid_search(
    frame: &SeriesFrame,
    base: &TrainConfig,
    alpha_grid: &[f64],
    a_grid: &[f64],
) -> Result<GridResult> {
    if alpha_grid.is_empty() || a_grid.is_empty() {
        return Err(Error::Config("grid search needs non-empty grids".into()));
    }
    base.validate()?;
    let similarity = correlation_matrix(frame);
    let combos: Vec<(f64, f64)> = alpha_grid
        .iter()
        .flat_map(|&al| a_grid.iter().map(move |&a| (al, a)))
        .collect();
    let run = |&(alpha_bar, a): &(f64, f64)| -> (GridCell, Option<(TrainOutcome, Metrics)>) {
        let cfg = TrainConfig { alpha_bar, a, ..base.clone() };
        let attempt = cluster(&similarity, alpha_bar).and_then(|g| {
            let out = train_grouped(frame, &cfg, g, similarity.clone())?;
            let val = evaluate(&out.ensemble, frame, Split::Val)?;
            Ok((out, val))
        });
        match attempt {
            Ok((out, val)) => (
                GridCell {
                    alpha_bar,
                    a,
                    groups: Some(out.ensemble.grouping.num_clusters()),
                    val_mse: Some(val.mse),
                    error: None,
                },
                Some((out, val)),
            ),
            Err(e) => {
                log::warn!("grid cell alpha_bar={alpha_bar}, a={a} failed: {e}");
                (
                    GridCell {
                        alpha_bar,
                        a,
                        groups: None,
                        val_mse: None,
                        error: Some(e.to_string()),
                    },
                    None,
                )
            }
        }
    };
    let results: Vec<_> = if base.parallel {
        combos.par_iter().map(run).collect()
    } else {
        combos.iter().map(run).collect()
    };

    let best = select_best(results.iter().map(|(c, _)| c)).ok_or(Error::AllCellsFailed(results.len()))?;
    let cells: Vec<GridCell> = results.iter().map(|(c, _)| c.clone()).collect();
    let (outcome, val) = results.into_iter().nth(best).and_then(|(_, o)| o).expect("winning cell trained");
    let test = evaluate(&outcome.ensemble, frame, Split::Test)?;
    let best_config = TrainConfig {
        alpha_bar: cells[best].alpha_bar,
        a: cells[best].a,
        ..base.clone()
    };
    Ok(GridResult {
        cells,
        best,
        best_config,
        outcome,
        val,
        test,
    })
}

/// Index of the winning cell, or `None` when every cell failed.
pub fn select_best<'a>(cells: impl IntoIterator<Item = &'a GridCell>) -> Option<usize> {
    let mut best: Option<(usize, &GridCell)> = None;
    for (i, cell) in cells.into_iter().enumerate() {
        let Some(v) = cell.val_mse.filter(|v| v.is_finite()) else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => {
                let bv = b.val_mse.unwrap();
                v < bv || (v == bv && (cell.a < b.a || (cell.a == b.a && cell.alpha_bar > b.alpha_bar)))
            }
        };
        if better {
            best = Some((i, cell));
        }
    }
    best.map(|(i, _)| i)
}
