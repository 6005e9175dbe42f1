//! Series ingestion, chronological splits, normalization and sliding windows.

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to per-variate standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Rows per split for the hourly ETT files (12 / 4 / 4 months).
const ETT_HOURLY_ROWS: [usize; 3] = [12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Row boundaries of the three chronological splits.
///
/// Train is `[0, train_end)`, validation `[train_end, val_end)` and test
/// `[val_end, test_end)`. Rows past `test_end` are unused (the ETT protocol
/// drops the tail of each file).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPoints {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

impl SplitPoints {
    pub fn new(train_end: usize, val_end: usize, test_end: usize, rows: usize) -> Result<Self> {
        if !(0 < train_end && train_end < val_end && val_end < test_end && test_end <= rows) {
            return Err(Error::Split(format!(
                "need 0 < train_end ({train_end}) < val_end ({val_end}) < test_end ({test_end}) <= rows ({rows})"
            )));
        }
        Ok(SplitPoints {
            train_end,
            val_end,
            test_end,
        })
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.test_end,
        }
    }
}

/// How to place split boundaries when loading a file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// ETT files get the fixed 12/4/4-month rows, everything else 0.7/0.1/0.2.
    #[default]
    Auto,
    /// Train and validation fractions; the test split takes the remainder.
    Fractions { train: f64, val: f64 },
    /// Explicit boundaries; the test split runs to the end of the file.
    Rows { train_end: usize, val_end: usize },
}

impl SplitRule {
    pub fn resolve(&self, rows: usize, file_name: &str) -> Result<SplitPoints> {
        match *self {
            SplitRule::Auto => match ett_rows(file_name) {
                Some([train, val, test]) if train + val + test <= rows => {
                    SplitPoints::new(train, train + val, train + val + test, rows)
                }
                Some(_) => {
                    log::warn!(
                        "{file_name}: only {rows} rows, too short for the ETT split; using 0.7/0.1/0.2"
                    );
                    fraction_split(rows, 0.7, 0.1)
                }
                None => fraction_split(rows, 0.7, 0.1),
            },
            SplitRule::Fractions { train, val } => fraction_split(rows, train, val),
            SplitRule::Rows { train_end, val_end } => {
                SplitPoints::new(train_end, val_end, rows, rows)
            }
        }
    }
}

fn ett_rows(file_name: &str) -> Option<[usize; 3]> {
    if file_name.starts_with("ETTh") {
        Some(ETT_HOURLY_ROWS)
    } else if file_name.starts_with("ETTm") {
        Some(ETT_HOURLY_ROWS.map(|r| r * 4))
    } else {
        None
    }
}

fn fraction_split(rows: usize, train: f64, val: f64) -> Result<SplitPoints> {
    if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
        return Err(Error::Split(format!(
            "fractions train={train}, val={val} must be positive and sum below 1"
        )));
    }
    let n = rows as f64;
    let train_end = (n * train + 1e-9).floor() as usize;
    let test_len = (n * (1.0 - train - val) + 1e-9).floor() as usize;
    SplitPoints::new(train_end, rows - test_len, rows, rows)
}

/// A full multivariate series: `values[t][v]` is variate `v` at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub name: String,
    pub values: Array2<f64>,
    pub variate_names: Vec<String>,
    pub timestamps: Vec<String>,
    pub split: SplitPoints,
}

impl SeriesFrame {
    pub fn new(
        name: impl Into<String>,
        values: Array2<f64>,
        variate_names: Vec<String>,
        timestamps: Vec<String>,
        split: SplitPoints,
    ) -> Result<Self> {
        let (rows, k) = values.dim();
        if k == 0 {
            return Err(Error::shape("series has no variates"));
        }
        if variate_names.len() != k {
            return Err(Error::shape(format!(
                "{} names for {k} variates",
                variate_names.len()
            )));
        }
        if !timestamps.is_empty() && timestamps.len() != rows {
            return Err(Error::shape(format!(
                "{} timestamps for {rows} rows",
                timestamps.len()
            )));
        }
        if split.test_end > rows {
            return Err(Error::Split(format!(
                "split ends at row {} but the series has {rows} rows",
                split.test_end
            )));
        }
        if let Some(((t, v), _)) = values.indexed_iter().find(|(_, x)| !x.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at row {t}, variate {v}")));
        }
        Ok(SeriesFrame {
            name: name.into(),
            values,
            variate_names,
            timestamps,
            split,
        })
    }

    /// Builds a frame from raw values with the given split rule, no timestamps.
    pub fn from_values(name: &str, values: Array2<f64>, rule: SplitRule) -> Result<Self> {
        let split = rule.resolve(values.nrows(), name)?;
        let names = (0..values.ncols()).map(|i| format!("v{i}")).collect();
        SeriesFrame::new(name, values, names, Vec::new(), split)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn num_variates(&self) -> usize {
        self.values.ncols()
    }

    pub fn rows(&self, split: Split) -> ArrayView2<'_, f64> {
        let r = self.split.range(split);
        self.values.slice(s![r, ..])
    }

    pub fn with_split(mut self, rule: SplitRule) -> Result<Self> {
        self.split = rule.resolve(self.len(), &self.name)?;
        Ok(self)
    }
}

/// Reads a comma-separated file whose `date_column` holds timestamps and all
/// other columns hold reals. Splits follow [`SplitRule::Auto`].
pub fn load_csv(path: impl AsRef<Path>, date_column: &str) -> Result<SeriesFrame> {
    load_csv_with(path, date_column, SplitRule::Auto)
}

pub fn load_csv_with(
    path: impl AsRef<Path>,
    date_column: &str,
    rule: SplitRule,
) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let date_idx = header
        .iter()
        .position(|h| h == date_column)
        .ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            message: format!("no date column '{date_column}' in header {header:?}"),
        })?;
    let value_cols: Vec<usize> = (0..header.len()).filter(|&i| i != date_idx).collect();
    if value_cols.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: "no value columns".into(),
        });
    }

    let mut flat = Vec::new();
    let mut timestamps = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        timestamps.push(record.get(date_idx).unwrap_or_default().to_string());
        for &c in &value_cols {
            let cell = record.get(c).unwrap_or_default();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => flat.push(v),
                _ => {
                    return Err(Error::BadCell {
                        path: path.to_path_buf(),
                        // 1-based data row, header excluded
                        row: row + 1,
                        column: header[c].clone(),
                        value: cell.to_string(),
                    })
                }
            }
        }
    }
    let rows = timestamps.len();
    if rows < 2 {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: format!("need at least 2 data rows, found {rows}"),
        });
    }
    let values = Array2::from_shape_vec((rows, value_cols.len()), flat)
        .map_err(|e| Error::shape(e.to_string()))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let split = rule.resolve(rows, &name)?;
    let variate_names = value_cols.iter().map(|&c| header[c].clone()).collect();
    SeriesFrame::new(name, values, variate_names, timestamps, split)
}

/// Per-variate standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variates whose train-split variance was zero (std floored).
    #[serde(default)]
    pub floored: Vec<usize>,
}

/// Mean and population standard deviation of each variate over the train rows.
pub fn fit_normalizer(frame: &SeriesFrame) -> Result<NormStats> {
    let train = frame.rows(Split::Train);
    if train.nrows() == 0 {
        return Err(Error::Split("train split is empty".into()));
    }
    let n = train.nrows() as f64;
    let mut mean = Vec::with_capacity(train.ncols());
    let mut std = Vec::with_capacity(train.ncols());
    let mut floored = Vec::new();
    for (v, col) in train.axis_iter(Axis(1)).enumerate() {
        let m = col.sum() / n;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd < STD_FLOOR {
            log::warn!(
                "{}: variate '{}' has zero variance on the train split",
                frame.name,
                frame.variate_names[v]
            );
            floored.push(v);
            std.push(STD_FLOOR);
        } else {
            std.push(sd);
        }
        mean.push(m);
    }
    Ok(NormStats { mean, std, floored })
}

impl NormStats {
    pub fn normalize_values(&self, values: &mut Array2<f64>) {
        for (v, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
            let (m, sd) = (self.mean[v], self.std[v]);
            col.mapv_inplace(|x| (x - m) / sd);
        }
    }

    pub fn denormalize_values(&self, values: &mut Array2<f64>) {
        for (v, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
            let (m, sd) = (self.mean[v], self.std[v]);
            col.mapv_inplace(|x| x * sd + m);
        }
    }

    pub fn normalize(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        if self.mean.len() != frame.num_variates() {
            return Err(Error::shape(format!(
                "normalizer fitted on {} variates, frame has {}",
                self.mean.len(),
                frame.num_variates()
            )));
        }
        let mut out = frame.clone();
        self.normalize_values(&mut out.values);
        Ok(out)
    }
}

/// Number of stride-1 windows in a span of `m` rows.
pub fn window_count(m: usize, lookback: usize, horizon: usize) -> usize {
    (m + 1).saturating_sub(lookback + horizon)
}

/// A batch of `B` windows: lookbacks `B×l×k` and targets `B×h×k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub lookbacks: Array3<f64>,
    pub targets: Array3<f64>,
    /// First row of each window in the frame.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.lookbacks.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookback(&self) -> usize {
        self.lookbacks.len_of(Axis(1))
    }

    pub fn horizon(&self) -> usize {
        self.targets.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.lookbacks.len_of(Axis(2))
    }

    /// Keeps only the given variate columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> WindowBatch {
        WindowBatch {
            lookbacks: self.lookbacks.select(Axis(2), columns),
            targets: self.targets.select(Axis(2), columns),
            starts: self.starts.clone(),
        }
    }
}

/// Iterator over the windows of one split.
#[derive(Debug, Clone)]
pub struct WindowStream<'a> {
    values: ArrayView2<'a, f64>,
    columns: Option<Vec<usize>>,
    starts: Vec<usize>,
    lookback: usize,
    horizon: usize,
    batch: usize,
    pos: usize,
}

/// Stride-1 windows lying entirely inside `split`. Train windows are shuffled
/// when a seed is given; validation and test windows always come in order.
pub fn windows(
    frame: &SeriesFrame,
    split: Split,
    lookback: usize,
    horizon: usize,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> Result<WindowStream<'_>> {
    if lookback == 0 || horizon == 0 || batch == 0 {
        return Err(Error::Config(format!(
            "lookback ({lookback}), horizon ({horizon}) and batch ({batch}) must be positive"
        )));
    }
    let range = frame.split.range(split);
    let m = range.len();
    if m < lookback + horizon {
        return Err(Error::Split(format!(
            "{split:?} split has {m} rows, fewer than lookback + horizon = {}",
            lookback + horizon
        )));
    }
    let mut starts: Vec<usize> = (range.start..range.start + window_count(m, lookback, horizon)).collect();
    if let (Split::Train, Some(seed)) = (split, shuffle_seed) {
        starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(WindowStream {
        values: frame.values.view(),
        columns: None,
        starts,
        lookback,
        horizon,
        batch,
        pos: 0,
    })
}

impl<'a> WindowStream<'a> {
    /// Restricts every batch to the given variate columns.
    pub fn with_columns(mut self, columns: &[usize]) -> Self {
        self.columns = Some(columns.to_vec());
        self
    }

    pub fn window_count(&self) -> usize {
        self.starts.len()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    fn gather(&self, starts: &[usize]) -> WindowBatch {
        let all: Vec<usize>;
        let cols: &[usize] = match &self.columns {
            Some(c) => c,
            None => {
                all = (0..self.values.ncols()).collect();
                &all
            }
        };
        let (l, h, k) = (self.lookback, self.horizon, cols.len());
        let mut lookbacks = Array3::zeros((starts.len(), l, k));
        let mut targets = Array3::zeros((starts.len(), h, k));
        for (b, &t0) in starts.iter().enumerate() {
            for (c, &col) in cols.iter().enumerate() {
                for t in 0..l {
                    lookbacks[[b, t, c]] = self.values[[t0 + t, col]];
                }
                for t in 0..h {
                    targets[[b, t, c]] = self.values[[t0 + l + t, col]];
                }
            }
        }
        WindowBatch {
            lookbacks,
            targets,
            starts: starts.to_vec(),
        }
    }

    /// All remaining windows as one batch.
    pub fn collect_all(mut self) -> WindowBatch {
        let rest = self.starts[self.pos..].to_vec();
        self.pos = self.starts.len();
        self.gather(&rest)
    }
}

impl Iterator for WindowStream<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.pos >= self.starts.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.starts.len());
        let out = self.gather(&self.starts[self.pos..end]);
        self.pos = end;
        Some(out)
    }
}
