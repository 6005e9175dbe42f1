//! Run configuration: built-in defaults, an optional TOML file, then flags.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, FRAC_PI_6};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mtlinear::data::SplitRule;
use mtlinear::grouping::parse_angle;
use mtlinear::trainer::TrainConfig;
use serde::{Deserialize, Deserializer, Serialize};

pub const DATA_DIR_ENV: &str = "MTLINEAR_DATA_DIR";
pub const DEFAULT_SEEDS: [u64; 3] = [2021, 2022, 2023];
pub const ALPHA_GRID: [f64; 4] = [FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, FRAC_PI_6];
pub const A_GRID: [f64; 2] = [1.0, 2.0];
pub const GROUPS_ALPHAS: [f64; 5] = [0.0, FRAC_PI_6, FRAC_PI_4, FRAC_PI_3, FRAC_PI_2];

/// Everything a run depends on. Empty lists and `None` mean "use the
/// command's default"; [`RunConfig::resolve`] fills them in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub date_column: String,
    pub lookback: Option<usize>,
    pub horizons: Vec<usize>,
    /// Radians. Strings such as `"pi/6"` are accepted when reading.
    #[serde(deserialize_with = "angles")]
    pub alpha_bar: Vec<f64>,
    pub a: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fit heads on z-scored data (train-split statistics).
    pub normalize: bool,
    pub split: SplitRule,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            date_column: "date".into(),
            lookback: None,
            horizons: Vec::new(),
            alpha_bar: Vec::new(),
            a: Vec::new(),
            seeds: Vec::new(),
            normalize: true,
            split: SplitRule::Auto,
            train: TrainConfig::default(),
        }
    }
}

fn angles<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Angle {
        Radians(f64),
        Text(String),
    }
    Vec::<Angle>::deserialize(d)?
        .into_iter()
        .map(|a| match a {
            Angle::Radians(r) => Ok(r),
            Angle::Text(t) => parse_angle(&t).map_err(serde::de::Error::custom),
        })
        .collect()
}

/// Which defaults apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Bench,
    Groups,
    Conflicts,
    Evaluate,
}

/// ILI is weekly and short; it gets its own horizons and lookback.
pub fn is_ili(dataset: &Path) -> bool {
    let stem = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    stem.contains("national_illness") || stem == "ili"
}

pub fn default_horizons(dataset: &Path) -> Vec<usize> {
    if is_ili(dataset) {
        vec![24, 36, 48, 60]
    } else {
        vec![96, 192, 336, 720]
    }
}

pub fn default_lookback(dataset: &Path) -> usize {
    if is_ili(dataset) {
        36
    } else {
        96
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Replaces every "use the default" marker with a concrete value and
    /// checks the result.
    pub fn resolve(mut self, cmd: Command, grid: bool) -> anyhow::Result<Self> {
        if self.dataset.as_os_str().is_empty() {
            bail!("no dataset given (use --dataset or `dataset = ...` in the config file)");
        }
        let lookback = *self.lookback.get_or_insert_with(|| default_lookback(&self.dataset));
        if self.horizons.is_empty() {
            self.horizons = match cmd {
                Command::Bench => default_horizons(&self.dataset),
                _ => vec![default_horizons(&self.dataset)[0]],
            };
        }
        let full_grid = grid || cmd == Command::Bench;
        if self.alpha_bar.is_empty() {
            self.alpha_bar = match cmd {
                Command::Groups => GROUPS_ALPHAS.to_vec(),
                Command::Conflicts => vec![FRAC_PI_2],
                _ if full_grid => ALPHA_GRID.to_vec(),
                _ => vec![FRAC_PI_4],
            };
        }
        if self.a.is_empty() {
            self.a = if full_grid && cmd != Command::Conflicts {
                A_GRID.to_vec()
            } else {
                vec![1.0]
            };
        }
        if self.seeds.is_empty() {
            self.seeds = match cmd {
                Command::Bench => DEFAULT_SEEDS.to_vec(),
                _ => vec![DEFAULT_SEEDS[0]],
            };
        }
        self.train.lookback = lookback;
        self.train.horizon = self.horizons[0];
        self.train.alpha_bar = self.alpha_bar[0];
        self.train.a = self.a[0];
        self.train.seed = self.seeds[0];
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.horizons.contains(&0) || self.lookback == Some(0) {
            bail!("lookback and horizons must be positive");
        }
        if let Some(bad) = self.alpha_bar.iter().find(|a| !(0.0..=FRAC_PI_2 + 1e-12).contains(*a)) {
            bail!("alpha_bar {bad} is outside [0, pi/2]");
        }
        if let Some(bad) = self.a.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            bail!("penalty exponent {bad} must be a finite number >= 0");
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }

    /// The dataset path, relative paths taken from `MTLINEAR_DATA_DIR` when set.
    pub fn dataset_path(&self) -> PathBuf {
        resolve_data_path(&self.dataset, std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

pub fn resolve_data_path(dataset: &Path, base: Option<PathBuf>) -> PathBuf {
    match base {
        Some(base) if dataset.is_relative() => {
            let joined = base.join(dataset);
            if joined.exists() || !dataset.exists() {
                joined
            } else {
                dataset.to_path_buf()
            }
        }
        _ => dataset.to_path_buf(),
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} '{s}': {e}")))
        .collect()
}

pub fn parse_angles(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_angle(s).map_err(anyhow::Error::from))
        .collect()
}
