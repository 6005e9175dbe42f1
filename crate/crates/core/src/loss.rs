//! Error-scaled weighted MSE and its closed-form gradient.
//!
//! For a head with cluster size `k_g`, horizon `h` and a batch of `B`
//! windows the objective is
//!
//! ```text
//! loss = 1/(k_g·h·B) · Σ_b Σ_j Σ_i w[i][j] · (pred[b][j][i] - y[b][j][i])²
//! ```
//!
//! with penalty weights `w[i][j] = (K_j · H_i + ε)^(-a)`, where `K_j` is the
//! mean absolute error of horizon step `j` over the cluster's variates and
//! `H_i` the mean absolute error of variate `i` over the horizon. The
//! weights are treated as constants when differentiating.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::data::WindowBatch;
use crate::models::{Design, LinearHead};
use crate::{Error, Result};

/// Floor on `K_j · H_i`, so exactly-zero errors still give finite weights.
pub const PENALTY_EPS: f64 = 1e-8;

/// Batch-averaged absolute residuals, `k_g×h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    pub e: Array2<f64>,
}

/// Per-(variate, horizon step) loss weights, `k_g×h`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyWeights {
    pub w: Array2<f64>,
    pub a: f64,
}

impl PenaltyWeights {
    pub fn ones(width: usize, horizon: usize) -> Self {
        PenaltyWeights {
            w: Array2::ones((width, horizon)),
            a: 0.0,
        }
    }
}

pub fn penalty_weights(e: &ErrorMatrix, a: f64) -> PenaltyWeights {
    let (k, h) = e.e.dim();
    // K_j: mean over variates (rows); H_i: mean over horizon steps (columns)
    let k_mean = e.e.sum_axis(Axis(0)) / k as f64;
    let h_mean = e.e.sum_axis(Axis(1)) / h as f64;
    let w = Array2::from_shape_fn((k, h), |(i, j)| (k_mean[j] * h_mean[i]).max(PENALTY_EPS).powf(-a));
    PenaltyWeights { w, a }
}

/// Design rows, flattened targets and residuals of one head on one batch.
#[derive(Debug, Clone)]
pub struct Residuals {
    pub design: Design,
    pub targets: Array2<f64>,
    pub residual: Array2<f64>,
}

impl Residuals {
    pub fn compute(head: &LinearHead, batch: &WindowBatch) -> Result<Self> {
        if batch.horizon() != head.horizon {
            return Err(Error::shape(format!(
                "targets cover {} steps, head forecasts {}",
                batch.horizon(),
                head.horizon
            )));
        }
        let design = Design::build(head, batch.lookbacks.view())?;
        let targets = design.flatten_targets(batch.targets.view())?;
        let residual = design.predict(head) - &targets;
        if residual.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                head: head.id,
                what: "prediction",
            });
        }
        Ok(Residuals {
            design,
            targets,
            residual,
        })
    }

    fn norm(&self) -> f64 {
        (self.design.rows() * self.residual.ncols()) as f64
    }

    fn check_weights(&self, w: &PenaltyWeights) -> Result<()> {
        let want = (self.design.width, self.residual.ncols());
        if w.w.dim() != want {
            return Err(Error::shape(format!(
                "penalty weights are {:?}, expected {want:?}",
                w.w.dim()
            )));
        }
        Ok(())
    }

    pub fn error_matrix(&self) -> ErrorMatrix {
        let (width, batch) = (self.design.width, self.design.batch);
        let mut e = Array2::zeros((width, self.residual.ncols()));
        for (r, row) in self.residual.outer_iter().enumerate() {
            let mut dst = e.row_mut(r % width);
            dst.zip_mut_with(&row, |acc, &x| *acc += x.abs());
        }
        e /= batch as f64;
        ErrorMatrix { e }
    }

    pub fn loss(&self, w: &PenaltyWeights) -> Result<f64> {
        self.check_weights(w)?;
        let width = self.design.width;
        let mut total = 0.0;
        for (r, row) in self.residual.outer_iter().enumerate() {
            let wr = w.w.row(r % width);
            total += row.iter().zip(wr).map(|(x, w)| w * x * x).sum::<f64>();
        }
        Ok(total / self.norm())
    }

    /// `w ⊙ r` scaled by the per-row output scale, i.e. `∂loss/∂(Z Θ)` up to
    /// the factor `2/N`.
    fn weighted_residual(&self, w: &PenaltyWeights) -> Array2<f64> {
        let width = self.design.width;
        let mut out = self.residual.clone();
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            let s = self.design.scale[r];
            row.zip_mut_with(&w.w.row(r % width), |x, &wij| *x *= wij * s);
        }
        out
    }

    pub fn gradient(&self, w: &PenaltyWeights) -> Result<Vec<Array2<f64>>> {
        self.check_weights(w)?;
        let g = self.weighted_residual(w);
        let factor = 2.0 / self.norm();
        Ok(self
            .design
            .blocks
            .iter()
            .map(|z| z.t().dot(&g) * factor)
            .collect())
    }

    /// Per-variate gradient contributions, flattened over every weight
    /// matrix (row-major, trend block first for DLinear). Entry `i` is
    /// `2/(h·B) Σ_b Σ_j w_ij r_bij s_bi z_bi ⊗ e_j`, so their mean equals the
    /// full gradient.
    pub fn per_variate_gradients(&self, w: &PenaltyWeights) -> Result<Vec<Vec<f64>>> {
        self.check_weights(w)?;
        let g = self.weighted_residual(w);
        let (width, batch, h) = (self.design.width, self.design.batch, self.residual.ncols());
        let factor = 2.0 / (h * batch) as f64;
        let mut out = Vec::with_capacity(width);
        for i in 0..width {
            let rows: Vec<usize> = (0..batch).map(|b| b * width + i).collect();
            let gi = g.select(Axis(0), &rows);
            let mut flat = Vec::new();
            for z in &self.design.blocks {
                let zi = z.select(Axis(0), &rows);
                let part = zi.t().dot(&gi) * factor;
                flat.extend(part.iter().copied());
            }
            out.push(flat);
        }
        Ok(out)
    }
}

pub fn error_matrix(head: &LinearHead, batch: &WindowBatch) -> Result<ErrorMatrix> {
    Ok(Residuals::compute(head, batch)?.error_matrix())
}

pub fn weighted_loss(head: &LinearHead, batch: &WindowBatch, w: &PenaltyWeights) -> Result<f64> {
    Residuals::compute(head, batch)?.loss(w)
}

/// Plain MSE over all windows, variates and horizon steps.
pub fn mse(head: &LinearHead, batch: &WindowBatch) -> Result<f64> {
    let res = Residuals::compute(head, batch)?;
    Ok(res.residual.iter().map(|r| r * r).sum::<f64>() / res.norm())
}

/// Gradient of [`weighted_loss`] with respect to each weight matrix of `head`.
pub fn analytic_gradient(
    head: &LinearHead,
    batch: &WindowBatch,
    w: &PenaltyWeights,
) -> Result<Vec<Array2<f64>>> {
    Residuals::compute(head, batch)?.gradient(w)
}

/// `max_j 2·‖Zᵀ diag(w_j) Z‖_F` for a design `n×p` and weights `n×h`: a
/// Lipschitz constant of the gradient of `Σ_j Σ_n w_nj (z_nᵀθ_j - y_nj)²`.
pub fn lipschitz_bound(design: ArrayView2<'_, f64>, weights: ArrayView2<'_, f64>) -> f64 {
    let mut best = 0.0f64;
    for wj in weights.axis_iter(Axis(1)) {
        let mut scaled = design.to_owned();
        for (mut row, &w) in scaled.outer_iter_mut().zip(wj) {
            row *= w.max(0.0).sqrt();
        }
        let gram = scaled.t().dot(&scaled);
        best = best.max(2.0 * gram.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    best
}

/// Lipschitz constant of [`analytic_gradient`] for this head and batch,
/// including the `1/(k_g·h·B)` normalization and the output scale.
pub fn head_lipschitz(head: &LinearHead, batch: &WindowBatch, w: &PenaltyWeights) -> Result<f64> {
    let res = Residuals::compute(head, batch)?;
    res.check_weights(w)?;
    let views: Vec<_> = res.design.blocks.iter().map(|b| b.view()).collect();
    let mut z = concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
    for (mut row, &s) in z.outer_iter_mut().zip(&res.design.scale) {
        row *= s;
    }
    let width = res.design.width;
    let rows_w = Array2::from_shape_fn((res.design.rows(), head.horizon), |(r, j)| w.w[[r % width, j]]);
    Ok(lipschitz_bound(z.view(), rows_w.view()) / res.norm())
}
