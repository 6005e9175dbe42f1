//! Gradient-conflict bookkeeping between variates.
//!
//! Each variate of a cluster contributes its own gradient to the shared
//! head weights. Two variates conflict at a step when their contributions
//! have a negative inner product.

use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::grouping::SimilarityMatrix;
use crate::loss::{PenaltyWeights, Residuals};
use crate::models::LinearHead;
use crate::{Error, Result};

/// When conflicts are counted during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictMode {
    /// On every optimizer step, using that step's batch.
    PerStep,
    /// Once per epoch on a fixed probe batch (the first train windows).
    ProbeEpoch,
}

impl std::str::FromStr for ConflictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" | "per-step" => Ok(ConflictMode::PerStep),
            "probe_epoch" | "probe-epoch" => Ok(ConflictMode::ProbeEpoch),
            other => Err(Error::Config(format!("unknown conflict mode '{other}'"))),
        }
    }
}

/// Batch-averaged gradient contribution of each variate, flattened over all
/// of the head's weights. Their mean is the gradient of the weighted loss.
pub fn per_variate_gradients(head: &LinearHead, batch: &WindowBatch, w: &PenaltyWeights) -> Result<Vec<Vec<f64>>> {
    Residuals::compute(head, batch)?.per_variate_gradients(w)
}

/// `conflict[a][b] = g_a · g_b < 0`.
pub fn count_conflicts(grads: &[Vec<f64>]) -> Vec<Vec<bool>> {
    let k = grads.len();
    let mut out = vec![vec![false; k]; k];
    for a in 0..k {
        for b in (a + 1)..k {
            let dot: f64 = grads[a].iter().zip(&grads[b]).map(|(x, y)| x * y).sum();
            out[a][b] = dot < 0.0;
            out[b][a] = out[a][b];
        }
    }
    out
}

/// Cumulative conflict counts over all variates of a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictLedger {
    pub counts: Vec<Vec<u64>>,
    pub per_epoch: Vec<Vec<Vec<u64>>>,
}

impl ConflictLedger {
    pub fn new(k: usize) -> Self {
        ConflictLedger {
            counts: vec![vec![0; k]; k],
            per_epoch: Vec::new(),
        }
    }

    pub fn num_variates(&self) -> usize {
        self.counts.len()
    }

    pub fn begin_epoch(&mut self) {
        let k = self.num_variates();
        self.per_epoch.push(vec![vec![0; k]; k]);
    }

    /// Adds a local conflict matrix whose rows map to the variates `cols`.
    pub fn record(&mut self, conflicts: &[Vec<bool>], cols: &[usize]) {
        if self.per_epoch.is_empty() {
            self.begin_epoch();
        }
        let epoch = self.per_epoch.last_mut().expect("epoch started");
        for (i, row) in conflicts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c {
                    self.counts[cols[i]][cols[j]] += 1;
                    epoch[cols[i]][cols[j]] += 1;
                }
            }
        }
    }

    /// Elementwise sum; epochs are aligned by index.
    pub fn merge(&mut self, other: &ConflictLedger) {
        for (dst, src) in self.counts.iter_mut().zip(&other.counts) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let k = self.num_variates();
        while self.per_epoch.len() < other.per_epoch.len() {
            self.per_epoch.push(vec![vec![0; k]; k]);
        }
        for (dst, src) in self.per_epoch.iter_mut().zip(&other.per_epoch) {
            for (dr, sr) in dst.iter_mut().zip(src) {
                for (d, s) in dr.iter_mut().zip(sr) {
                    *d += s;
                }
            }
        }
    }

    /// Total conflicts (each unordered pair once) per epoch.
    pub fn epoch_totals(&self) -> Vec<u64> {
        self.per_epoch
            .iter()
            .map(|m| {
                (0..m.len())
                    .flat_map(|a| ((a + 1)..m.len()).map(move |b| (a, b)))
                    .map(|(a, b)| m[a][b])
                    .sum()
            })
            .collect()
    }

    /// Symmetric, zero diagonal, and per-epoch increments summing to the totals.
    pub fn is_consistent(&self) -> bool {
        let k = self.num_variates();
        let symmetric = |m: &Vec<Vec<u64>>| (0..k).all(|a| m[a][a] == 0 && (0..k).all(|b| m[a][b] == m[b][a]));
        if !symmetric(&self.counts) || !self.per_epoch.iter().all(symmetric) {
            return false;
        }
        (0..k).all(|a| (0..k).all(|b| self.per_epoch.iter().map(|m| m[a][b]).sum::<u64>() == self.counts[a][b]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub variate: usize,
    pub step: usize,
    /// Mean absolute error of the variate over the horizon.
    pub error: f64,
    pub grad_norm: f64,
}

/// Error versus gradient magnitude, per variate and step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradErrorTrace {
    pub records: Vec<TraceRecord>,
}

impl GradErrorTrace {
    /// Pearson correlation between error and gradient norm over all records.
    pub fn error_norm_correlation(&self) -> Option<f64> {
        let xs: Vec<f64> = self.records.iter().map(|r| r.error).collect();
        let ys: Vec<f64> = self.records.iter().map(|r| r.grad_norm).collect();
        pearson(&xs, &ys)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub variate_a: String,
    pub variate_b: String,
    pub abs_corr: f64,
    pub conflicts_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub pairs: Vec<PairRecord>,
    /// Spearman correlation between `abs_corr` and `conflicts_total`; `None`
    /// when either column is constant or there are fewer than two pairs.
    pub rank_correlation: Option<f64>,
    pub epoch_totals: Vec<u64>,
}

impl ConflictReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variate_a,variate_b,abs_corr,conflicts_total\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&p.variate_a),
                csv_field(&p.variate_b),
                p.abs_corr,
                p.conflicts_total
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn correlation_vs_conflict_report(
    ledger: &ConflictLedger,
    sim: &SimilarityMatrix,
    names: &[String],
) -> ConflictReport {
    let k = ledger.num_variates();
    let mut pairs = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in (a + 1)..k {
            pairs.push(PairRecord {
                variate_a: names[a].clone(),
                variate_b: names[b].clone(),
                abs_corr: sim.r_abs[[a, b]],
                conflicts_total: ledger.counts[a][b],
            });
        }
    }
    let corr: Vec<f64> = pairs.iter().map(|p| p.abs_corr).collect();
    let conf: Vec<f64> = pairs.iter().map(|p| p.conflicts_total as f64).collect();
    ConflictReport {
        rank_correlation: spearman(&corr, &conf),
        pairs,
        epoch_totals: ledger.epoch_totals(),
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{analytic_gradient, penalty_weights, error_matrix};
    use crate::models::{init_head, Variant};
    use ndarray::{array, Array3};
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(b: usize, l: usize, h: usize, k: usize, seed: u64) -> WindowBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(-1.0, 1.0);
        WindowBatch {
            lookbacks: Array3::from_shape_fn((b, l, k), |_| d.sample(&mut rng)),
            targets: Array3::from_shape_fn((b, h, k), |_| d.sample(&mut rng)),
            starts: (0..b).collect(),
        }
    }

    #[test]
    fn decomposition_identity() {
        for (vi, variant) in Variant::ALL.into_iter().enumerate() {
            let mut head = init_head(variant, 6, 3, vi as u64).unwrap();
            head.ma_kernel = 3;
            let batch = random_batch(5, 6, 3, 4, 40 + vi as u64);
            let w = penalty_weights(&error_matrix(&head, &batch).unwrap(), 1.0);
            let per = per_variate_gradients(&head, &batch, &w).unwrap();
            let total: Vec<f64> = analytic_gradient(&head, &batch, &w)
                .unwrap()
                .iter()
                .flat_map(|g| g.iter().copied().collect::<Vec<_>>())
                .collect();
            for (p, t) in total.iter().enumerate() {
                let mean = per.iter().map(|g| g[p]).sum::<f64>() / per.len() as f64;
                assert!((mean - t).abs() < 1e-10, "{variant}: {mean} vs {t}");
            }
        }
    }

    #[test]
    fn single_variate_gradient_is_total() {
        let head = init_head(Variant::Linear, 4, 2, 3).unwrap();
        let batch = random_batch(3, 4, 2, 1, 5);
        let w = PenaltyWeights::ones(1, 2);
        let per = per_variate_gradients(&head, &batch, &w).unwrap();
        let total: Vec<f64> = analytic_gradient(&head, &batch, &w).unwrap()[0].iter().copied().collect();
        assert_eq!(per.len(), 1);
        for (a, b) in per[0].iter().zip(&total) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_columns_share_gradients() {
        let head = init_head(Variant::NLinear, 4, 2, 3).unwrap();
        let mut batch = random_batch(3, 4, 2, 2, 6);
        let lb = batch.lookbacks.slice(ndarray::s![.., .., 0]).to_owned();
        batch.lookbacks.slice_mut(ndarray::s![.., .., 1]).assign(&lb);
        let tg = batch.targets.slice(ndarray::s![.., .., 0]).to_owned();
        batch.targets.slice_mut(ndarray::s![.., .., 1]).assign(&tg);
        let per = per_variate_gradients(&head, &batch, &PenaltyWeights::ones(2, 2)).unwrap();
        assert_eq!(per[0], per[1]);
        assert!(!count_conflicts(&per)[0][1]);
    }

    #[test]
    fn negated_pair_without_bias_has_equal_gradients() {
        // x_b = -x_a, y_b = -y_a: the residual flips sign along with x.
        let mut head = init_head(Variant::Linear, 4, 2, 3).unwrap();
        head.bias = false;
        let mut batch = random_batch(3, 4, 2, 2, 6);
        let lb = batch.lookbacks.slice(ndarray::s![.., .., 0]).mapv(|v| -v);
        batch.lookbacks.slice_mut(ndarray::s![.., .., 1]).assign(&lb);
        let tg = batch.targets.slice(ndarray::s![.., .., 0]).mapv(|v| -v);
        batch.targets.slice_mut(ndarray::s![.., .., 1]).assign(&tg);
        let w = penalty_weights(&error_matrix(&head, &batch).unwrap(), 1.0);
        let per = per_variate_gradients(&head, &batch, &w).unwrap();
        for (a, b) in per[0].iter().zip(&per[1]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn conflict_signs() {
        let g = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![-1.0, -2.0]];
        let c = count_conflicts(&g);
        assert!(!c[0][1]);
        assert!(c[0][2] && c[2][0]);
        assert!(!c[0][0]);
    }

    #[test]
    fn ledger_bookkeeping() {
        let mut a = ConflictLedger::new(3);
        a.begin_epoch();
        a.record(&[vec![false, true], vec![true, false]], &[0, 2]);
        a.begin_epoch();
        a.record(&[vec![false, true], vec![true, false]], &[0, 2]);
        let mut b = ConflictLedger::new(3);
        b.begin_epoch();
        b.record(&[vec![false, true], vec![true, false]], &[1, 2]);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert!(ab.is_consistent());
        assert_eq!(ab.counts[0][2], 2);
        assert_eq!(ab.counts[1][2], 1);
        assert_eq!(ab.epoch_totals(), vec![2, 1]);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 8.0, 3.0, 1.0]).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[5.0, 5.0]).is_none());
    }

    #[test]
    fn report_for_two_variates() {
        let mut ledger = ConflictLedger::new(2);
        ledger.record(&[vec![false, false], vec![false, false]], &[0, 1]);
        let sim = SimilarityMatrix::new(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let names = vec!["x".to_string(), "y,z".to_string()];
        let r = correlation_vs_conflict_report(&ledger, &sim, &names);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].conflicts_total, 0);
        assert_eq!(r.to_csv(), "variate_a,variate_b,abs_corr,conflicts_total\nx,\"y,z\",1,0\n");
    }
}
