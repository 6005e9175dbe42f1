//! Linear forecasting heads applied along the time axis.
//!
//! A head maps a lookback window `l×k_g` to a forecast `h×k_g` for the `k_g`
//! variates of one cluster. Every variate is treated as a separate sample of
//! the same regression: its (transformed) lookback column, augmented with a
//! constant 1, is multiplied by `theta` of shape `(l+1)×h`. The last row of
//! `theta` is the bias.
//!
//! All four variants share one representation, [`Design`]: each variate of
//! each window becomes a row `z` (one per weight matrix), plus a scale `s`
//! and an offset `o`, and the prediction is `s · Σ_m z_mᵀ Θ_m + o`. This is
//! affine in the weights, which is what the loss and its closed-form
//! gradient rely on.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grouping::VariateGrouping;
use crate::{Error, Result};

/// Default moving-average kernel of the DLinear trend extractor.
pub const DEFAULT_MA_KERNEL: usize = 25;

/// Added to the per-window standard deviation in RLinear.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Linear,
    NLinear,
    DLinear,
    RLinear,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Linear, Variant::NLinear, Variant::DLinear, Variant::RLinear];

    /// Number of weight matrices a head of this variant carries.
    pub fn num_blocks(self) -> usize {
        match self {
            Variant::DLinear => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::NLinear => "nlinear",
            Variant::DLinear => "dlinear",
            Variant::RLinear => "rlinear",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Variant::Linear),
            "nlinear" => Ok(Variant::NLinear),
            "dlinear" => Ok(Variant::DLinear),
            "rlinear" => Ok(Variant::RLinear),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected linear, nlinear, dlinear or rlinear)"
            ))),
        }
    }
}

/// Weights of one cluster head.
///
/// `weights` holds one `(l+1)×h` matrix for Linear, NLinear and RLinear, and
/// two for DLinear (trend first, remainder second).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub id: usize,
    pub variant: Variant,
    pub lookback: usize,
    pub horizon: usize,
    pub ma_kernel: usize,
    /// When false the augmented input is 0 instead of 1, so the bias row
    /// never contributes and receives no gradient.
    pub bias: bool,
    pub weights: Vec<Array2<f64>>,
}

impl LinearHead {
    pub fn zeros(variant: Variant, lookback: usize, horizon: usize) -> Self {
        LinearHead {
            id: 0,
            variant,
            lookback,
            horizon,
            ma_kernel: DEFAULT_MA_KERNEL,
            bias: true,
            weights: vec![Array2::zeros((lookback + 1, horizon)); variant.num_blocks()],
        }
    }

    pub fn with_weights(variant: Variant, weights: Vec<Array2<f64>>) -> Result<Self> {
        let first = weights.first().ok_or_else(|| Error::shape("head without weights"))?;
        let (rows, horizon) = first.dim();
        if rows < 2 {
            return Err(Error::shape("weight matrix needs at least one lag row plus the bias row"));
        }
        let head = LinearHead {
            weights,
            ..LinearHead::zeros(variant, rows - 1, horizon)
        };
        head.check_shapes()?;
        Ok(head)
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.weights[0]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.weights.len() != self.variant.num_blocks() {
            return Err(Error::shape(format!(
                "{} head needs {} weight matrices, has {}",
                self.variant,
                self.variant.num_blocks(),
                self.weights.len()
            )));
        }
        for w in &self.weights {
            if w.dim() != (self.lookback + 1, self.horizon) {
                return Err(Error::shape(format!(
                    "weight matrix is {:?}, expected {:?}",
                    w.dim(),
                    (self.lookback + 1, self.horizon)
                )));
            }
        }
        if self.variant == Variant::DLinear && self.ma_kernel.is_multiple_of(2) {
            return Err(Error::shape(format!("moving-average kernel {} is not odd", self.ma_kernel)));
        }
        Ok(())
    }

    /// Forecast for a single window `l×k_g`, returned as `h×k_g`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let batch = x.insert_axis(Axis(0));
        let out = self.forward_batch(batch)?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Forecasts for a batch `B×l×k_g`, returned as `B×h×k_g`.
    pub fn forward_batch(&self, lookbacks: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let design = Design::build(self, lookbacks)?;
        let rows = design.predict(self);
        Ok(design.unflatten(rows.view()))
    }
}

/// Seeded initialization: lag rows uniform in `±1/sqrt(l+1)`, bias row zero.
pub fn init_head(variant: Variant, lookback: usize, horizon: usize, seed: u64) -> Result<LinearHead> {
    if lookback < 1 || horizon < 1 {
        return Err(Error::Config(format!(
            "lookback ({lookback}) and horizon ({horizon}) must be at least 1"
        )));
    }
    let bound = 1.0 / ((lookback + 1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = LinearHead::zeros(variant, lookback, horizon);
    for w in &mut head.weights {
        for r in 0..lookback {
            for c in 0..horizon {
                w[[r, c]] = dist.sample(&mut rng);
            }
        }
    }
    Ok(head)
}

/// Centered moving average with edge replication; `kernel` must be odd.
pub fn moving_average(x: &[f64], kernel: usize) -> Vec<f64> {
    let n = x.len();
    let half = kernel / 2;
    let at = |i: isize| -> f64 { x[i.clamp(0, n as isize - 1) as usize] };
    let mut window: f64 = (-(half as isize)..=(half as isize)).map(at).sum();
    let mut out = Vec::with_capacity(n);
    for t in 0..n as isize {
        out.push(window / kernel as f64);
        window += at(t + half as isize + 1) - at(t - half as isize);
    }
    out
}

/// Per-row inputs of a head for a batch of windows.
///
/// Row `b * k_g + i` belongs to variate `i` of window `b`.
#[derive(Debug, Clone)]
pub struct Design {
    pub blocks: Vec<Array2<f64>>,
    pub scale: Array1<f64>,
    pub offset: Array1<f64>,
    pub batch: usize,
    pub width: usize,
}

impl Design {
    pub fn build(head: &LinearHead, lookbacks: ArrayView3<'_, f64>) -> Result<Design> {
        let (batch, l, width) = lookbacks.dim();
        if l != head.lookback {
            return Err(Error::shape(format!(
                "lookback window has {l} steps, head expects {}",
                head.lookback
            )));
        }
        let n = batch * width;
        let aug = if head.bias { 1.0 } else { 0.0 };
        let mut blocks = vec![Array2::zeros((n, l + 1)); head.variant.num_blocks()];
        let mut scale = Array1::ones(n);
        let mut offset = Array1::zeros(n);
        let mut column = vec![0.0; l];
        for b in 0..batch {
            for i in 0..width {
                let row = b * width + i;
                for (t, c) in column.iter_mut().enumerate() {
                    *c = lookbacks[[b, t, i]];
                }
                match head.variant {
                    Variant::Linear => {
                        blocks[0].slice_mut(s![row, ..l]).assign(&ndarray::aview1(&column));
                    }
                    Variant::NLinear => {
                        let last = column[l - 1];
                        for t in 0..l {
                            blocks[0][[row, t]] = column[t] - last;
                        }
                        offset[row] = last;
                    }
                    Variant::DLinear => {
                        let trend = moving_average(&column, head.ma_kernel);
                        for t in 0..l {
                            blocks[0][[row, t]] = trend[t];
                            blocks[1][[row, t]] = column[t] - trend[t];
                        }
                    }
                    Variant::RLinear => {
                        let mean = column.iter().sum::<f64>() / l as f64;
                        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
                        let sd = var.sqrt() + INSTANCE_NORM_EPS;
                        for t in 0..l {
                            blocks[0][[row, t]] = (column[t] - mean) / sd;
                        }
                        scale[row] = sd;
                        offset[row] = mean;
                    }
                }
                for block in &mut blocks {
                    block[[row, l]] = aug;
                }
            }
        }
        Ok(Design {
            blocks,
            scale,
            offset,
            batch,
            width,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.width
    }

    /// `s · Σ_m Z_m Θ_m`, shape `rows×h`, without the offset.
    pub fn linear_part(&self, head: &LinearHead) -> Array2<f64> {
        let mut out = self.blocks[0].dot(&head.weights[0]);
        for (z, w) in self.blocks.iter().zip(&head.weights).skip(1) {
            out += &z.dot(w);
        }
        for (mut row, &s) in out.axis_iter_mut(Axis(0)).zip(&self.scale) {
            if s != 1.0 {
                row *= s;
            }
        }
        out
    }

    /// Predictions `rows×h`.
    pub fn predict(&self, head: &LinearHead) -> Array2<f64> {
        let mut out = self.linear_part(head);
        for (mut row, &o) in out.axis_iter_mut(Axis(0)).zip(&self.offset) {
            if o != 0.0 {
                row += o;
            }
        }
        out
    }

    /// Reshapes `rows×h` into `B×h×k_g`.
    pub fn unflatten(&self, rows: ArrayView2<'_, f64>) -> Array3<f64> {
        let h = rows.ncols();
        Array3::from_shape_fn((self.batch, h, self.width), |(b, j, i)| rows[[b * self.width + i, j]])
    }

    /// Reshapes `B×h×k_g` targets into `rows×h`.
    pub fn flatten_targets(&self, targets: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let (batch, h, width) = targets.dim();
        if batch != self.batch || width != self.width {
            return Err(Error::shape(format!(
                "targets are {batch}x{h}x{width}, lookbacks are {}x?x{}",
                self.batch, self.width
            )));
        }
        Ok(Array2::from_shape_fn((self.rows(), h), |(r, j)| {
            targets[[r / self.width, j, r % self.width]]
        }))
    }
}

/// One head per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadEnsemble {
    pub heads: Vec<LinearHead>,
    pub grouping: VariateGrouping,
    pub lookback: usize,
    pub horizon: usize,
}

impl HeadEnsemble {
    pub fn new(heads: Vec<LinearHead>, grouping: VariateGrouping) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::shape("ensemble without heads"))?;
        let (lookback, horizon) = (first.lookback, first.horizon);
        if heads.len() != grouping.num_clusters() {
            return Err(Error::shape(format!(
                "{} heads for {} clusters",
                heads.len(),
                grouping.num_clusters()
            )));
        }
        grouping.validate(grouping.num_variates())?;
        for h in &heads {
            h.check_shapes()?;
            if (h.lookback, h.horizon) != (lookback, horizon) {
                return Err(Error::shape("heads disagree on lookback or horizon"));
            }
        }
        Ok(HeadEnsemble {
            heads,
            grouping,
            lookback,
            horizon,
        })
    }

    pub fn num_variates(&self) -> usize {
        self.grouping.num_variates()
    }

    pub fn variant(&self) -> Variant {
        self.heads[0].variant
    }

    /// Forecast `h×k` for one lookback `l×k`.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let out = self.predict_batch(x.insert_axis(Axis(0)))?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Routes each cluster's columns to its head and reassembles the
    /// forecasts in the original variate order.
    pub fn predict_batch(&self, lookbacks: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (batch, _, k) = lookbacks.dim();
        if k != self.num_variates() {
            return Err(Error::shape(format!(
                "input has {k} variates, grouping covers {}",
                self.num_variates()
            )));
        }
        let mut out = Array3::zeros((batch, self.horizon, k));
        for (head, cols) in self.heads.iter().zip(&self.grouping.clusters) {
            let sub = lookbacks.select(Axis(2), cols);
            let pred = head.forward_batch(sub.view())?;
            for (i, &c) in cols.iter().enumerate() {
                out.slice_mut(s![.., .., c]).assign(&pred.slice(s![.., .., i]));
            }
        }
        Ok(out)
    }
}

/// On-disk form of an ensemble. Floats are written in shortest round-trip
/// form, so a load reproduces the weights bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: Variant,
    pub l: usize,
    pub h: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ma_kernel: Option<usize>,
    pub bias: bool,
    pub grouping: VariateGrouping,
    pub heads: Vec<HeadRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub variates: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta_trend: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta_remainder: Option<Vec<Vec<f64>>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Checkpoint("ragged weight matrix".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn from_ensemble(ens: &HeadEnsemble) -> Self {
        let variant = ens.variant();
        let heads = ens
            .heads
            .iter()
            .zip(&ens.grouping.clusters)
            .map(|(head, cols)| {
                let mut rec = HeadRecord {
                    variates: cols.clone(),
                    theta: None,
                    theta_trend: None,
                    theta_remainder: None,
                };
                if variant == Variant::DLinear {
                    rec.theta_trend = Some(to_rows(&head.weights[0]));
                    rec.theta_remainder = Some(to_rows(&head.weights[1]));
                } else {
                    rec.theta = Some(to_rows(&head.weights[0]));
                }
                rec
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            variant,
            l: ens.lookback,
            h: ens.horizon,
            ma_kernel: Some(ens.heads[0].ma_kernel),
            bias: ens.heads[0].bias,
            grouping: ens.grouping.clone(),
            heads,
        }
    }

    pub fn into_ensemble(self) -> Result<HeadEnsemble> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if self.heads.len() != self.grouping.num_clusters() {
            return Err(Error::Checkpoint("head count does not match grouping".into()));
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for (id, (rec, cols)) in self.heads.iter().zip(&self.grouping.clusters).enumerate() {
            if &rec.variates != cols {
                return Err(Error::Checkpoint(format!("head {id} variates disagree with grouping")));
            }
            let missing = |name: &str| Error::Checkpoint(format!("head {id} lacks {name}"));
            let weights = if self.variant == Variant::DLinear {
                vec![
                    from_rows(rec.theta_trend.as_deref().ok_or_else(|| missing("theta_trend"))?)?,
                    from_rows(rec.theta_remainder.as_deref().ok_or_else(|| missing("theta_remainder"))?)?,
                ]
            } else {
                vec![from_rows(rec.theta.as_deref().ok_or_else(|| missing("theta"))?)?]
            };
            let head = LinearHead {
                id,
                variant: self.variant,
                lookback: self.l,
                horizon: self.h,
                ma_kernel: self.ma_kernel.unwrap_or(DEFAULT_MA_KERNEL),
                bias: self.bias,
                weights,
            };
            head.check_shapes().map_err(|e| Error::Checkpoint(e.to_string()))?;
            heads.push(head);
        }
        HeadEnsemble::new(heads, self.grouping)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_head(variant: Variant, l: usize, h: usize, seed: u64) -> LinearHead {
        let mut head = init_head(variant, l, h, seed).unwrap();
        head.ma_kernel = 3;
        for (m, w) in head.weights.iter_mut().enumerate() {
            for c in 0..h {
                w[[l, c]] = 0.1 * (c as f64 + 1.0) * (m as f64 + 1.0);
            }
        }
        head
    }

    fn sample_lookbacks(b: usize, l: usize, k: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(-2.0, 2.0);
        Array3::from_shape_fn((b, l, k), |_| d.sample(&mut rng))
    }

    #[test]
    fn linear_hand_example() {
        let head = LinearHead::with_weights(Variant::Linear, vec![array![[1.0], [1.0], [0.0]]]).unwrap();
        let pred = head.forward(array![[3.0], [4.0]].view()).unwrap();
        assert_eq!(pred, array![[7.0]]);
    }

    #[test]
    fn nlinear_zero_weights_repeat_last_value() {
        let head = LinearHead::zeros(Variant::NLinear, 4, 3);
        let x = array![[1.0, -2.0], [2.0, 5.0], [0.5, 1.0], [3.0, -4.0]];
        let pred = head.forward(x.view()).unwrap();
        assert_eq!(pred, array![[3.0, -4.0], [3.0, -4.0], [3.0, -4.0]]);
    }

    #[test]
    fn dlinear_constant_lookback() {
        let trend = moving_average(&[2.5; 7], 5);
        assert!(trend.iter().all(|&t| (t - 2.5).abs() < 1e-15));
        let head = LinearHead::zeros(Variant::DLinear, 7, 2);
        let x = Array3::from_elem((1, 7, 1), 2.5);
        let d = Design::build(&head, x.view()).unwrap();
        assert!(d.blocks[1].slice(s![.., ..7]).iter().all(|&r| r.abs() < 1e-15));
    }

    #[test]
    fn moving_average_replicates_edges() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0], 3);
        let expect = [4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0];
        for (a, b) in ma.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // Kernel wider than the series.
        let ma = moving_average(&[1.0, 3.0], 5);
        // Padded to [1, 1, 1, 3, 3, 3].
        assert!((ma[0] - 9.0 / 5.0).abs() < 1e-12);
        assert!((ma[1] - 11.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn rlinear_zero_weights_predict_window_mean() {
        let head = LinearHead::zeros(Variant::RLinear, 3, 2);
        let pred = head.forward(array![[1.0], [2.0], [6.0]].view()).unwrap();
        assert!(pred.iter().all(|&p| (p - 3.0).abs() < 1e-12));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_head(Variant::DLinear, 12, 5, 7).unwrap();
        let b = init_head(Variant::DLinear, 12, 5, 7).unwrap();
        let c = init_head(Variant::DLinear, 12, 5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.weights.len(), 2);
        for w in &a.weights {
            assert!(w.row(12).iter().all(|&v| v == 0.0));
        }
        let big = init_head(Variant::Linear, 99, 101, 3).unwrap();
        let bound = 1.0 / 10.0;
        assert!(big.num_params() >= 10_000);
        assert!(big.weights[0].slice(s![..99, ..]).iter().all(|&v| v.abs() <= bound));
        assert!(init_head(Variant::Linear, 0, 3, 1).is_err());
        assert!(init_head(Variant::Linear, 3, 0, 1).is_err());
    }

    #[test]
    fn shape_errors() {
        let head = LinearHead::zeros(Variant::Linear, 4, 2);
        assert!(head.forward(Array2::zeros((3, 2)).view()).is_err());
        let g = VariateGrouping::single(3);
        let ens = HeadEnsemble::new(vec![head], g).unwrap();
        assert!(ens.predict(Array2::zeros((4, 2)).view()).is_err());
        assert!(LinearHead::with_weights(Variant::DLinear, vec![Array2::zeros((3, 2))]).is_err());
    }

    #[test]
    fn single_cluster_matches_head() {
        let head = random_head(Variant::NLinear, 6, 3, 1);
        let x = sample_lookbacks(1, 6, 4, 2).index_axis_move(Axis(0), 0);
        let ens = HeadEnsemble::new(vec![head.clone()], VariateGrouping::single(4)).unwrap();
        assert_eq!(ens.predict(x.view()).unwrap(), head.forward(x.view()).unwrap());
    }

    #[test]
    fn singletons_with_shared_weights_match_single_head() {
        let head = random_head(Variant::DLinear, 6, 3, 4);
        let x = sample_lookbacks(5, 6, 4, 5);
        let heads = (0..4).map(|i| LinearHead { id: i, ..head.clone() }).collect();
        let split = HeadEnsemble::new(heads, VariateGrouping::singletons(4)).unwrap();
        let joint = HeadEnsemble::new(vec![head], VariateGrouping::single(4)).unwrap();
        let a = split.predict_batch(x.view()).unwrap();
        let b = joint.predict_batch(x.view()).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let g = VariateGrouping::from_clusters(vec![vec![0, 2], vec![1]], 0.5).unwrap();
        for variant in Variant::ALL {
            let heads = (0..2)
                .map(|i| LinearHead { id: i, ..random_head(variant, 5, 3, 10 + i as u64) })
                .collect();
            let ens = HeadEnsemble::new(heads, g.clone()).unwrap();
            let json = Checkpoint::from_ensemble(&ens).to_json();
            let back: Checkpoint = serde_json::from_str(&json).unwrap();
            assert_eq!(back.into_ensemble().unwrap(), ens);
        }
    }

    proptest! {
        #[test]
        fn forward_is_affine_in_weights(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, vi in 0usize..4) {
            let variant = Variant::ALL[vi];
            let h1 = random_head(variant, 5, 2, seed);
            let h2 = random_head(variant, 5, 2, seed + 1);
            let x = sample_lookbacks(3, 5, 2, seed + 2);
            let zero = LinearHead { weights: h1.weights.iter().map(|w| w * 0.0).collect(), ..h1.clone() };
            let mix = LinearHead {
                weights: h1.weights.iter().zip(&h2.weights).map(|(p, q)| p * a + q * b).collect(),
                ..h1.clone()
            };
            let offset = zero.forward_batch(x.view()).unwrap();
            let f1 = &h1.forward_batch(x.view()).unwrap() - &offset;
            let f2 = &h2.forward_batch(x.view()).unwrap() - &offset;
            let fm = &mix.forward_batch(x.view()).unwrap() - &offset;
            let expect = &f1 * a + &f2 * b;
            for (u, v) in fm.iter().zip(expect.iter()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn dlinear_decomposition_is_exact(values in proptest::collection::vec(-100.0f64..100.0, 1..40), half in 0usize..6) {
            let kernel = 2 * half + 1;
            let trend = moving_average(&values, kernel);
            let remainder: Vec<f64> = values.iter().zip(&trend).map(|(x, t)| x - t).collect();
            for ((x, t), r) in values.iter().zip(&trend).zip(&remainder) {
                prop_assert!((t + r - x).abs() < 1e-12);
            }
        }

        #[test]
        fn permuting_variates_permutes_outputs(seed in 0u64..500, perm_seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let k = 5;
            let g = VariateGrouping::from_clusters(vec![vec![0, 3], vec![1], vec![2, 4]], 0.7).unwrap();
            let heads: Vec<_> = (0..3).map(|i| LinearHead { id: i, ..random_head(Variant::RLinear, 4, 2, seed + i as u64) }).collect();
            let ens = HeadEnsemble::new(heads.clone(), g.clone()).unwrap();
            let x = sample_lookbacks(2, 4, k, seed + 9);

            // new column c holds old variate perm[c]
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let mut inv = vec![0; k];
            for (c, &p) in perm.iter().enumerate() {
                inv[p] = c;
            }
            let clusters = g.clusters.iter().map(|c| c.iter().map(|&v| inv[v]).collect()).collect();
            let pg = VariateGrouping { clusters, ..g.clone() };
            let pens = HeadEnsemble::new(heads, pg).unwrap();
            let px = x.select(Axis(2), &perm);
            let out = ens.predict_batch(x.view()).unwrap();
            let pout = pens.predict_batch(px.view()).unwrap();
            prop_assert_eq!(pout, out.select(Axis(2), &perm));
        }
    }
}
