//! Multivariate forecasting with one linear head per cluster of correlated
//! variates.
//!
//! The pipeline is:
//!
//! 1. [`data`] loads a benchmark CSV, splits it chronologically and serves
//!    sliding windows.
//! 2. [`grouping`] clusters variates by absolute Pearson correlation using
//!    complete linkage with an angle threshold.
//! 3. [`models`] holds the per-cluster linear heads (Linear, NLinear, DLinear,
//!    RLinear) and routes variates to them.
//! 4. [`loss`] implements the error-scaled weighted MSE and its closed-form
//!    gradient.
//! 5. [`trainer`] fits every head independently with early stopping, and runs
//!    the grid search over the grouping threshold and penalty exponent.
//! 6. [`diagnostics`] counts gradient conflicts between variates.
//! 7. [`eval`] computes test metrics and benchmark tables.

pub mod data;
pub mod diagnostics;
mod error;
pub mod eval;
pub mod grouping;
pub mod loss;
pub mod models;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
