//! First-order update rules over a head's list of weight matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(crate::Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments for one head.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimState {
    Sgd,
    Adam {
        params: AdamParams,
        step: i32,
        m: Vec<Array2<f64>>,
        v: Vec<Array2<f64>>,
    },
}

impl OptimState {
    pub fn new(kind: OptimizerKind, params: AdamParams, shapes: &[Array2<f64>]) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimState::Sgd,
            OptimizerKind::Adam => OptimState::Adam {
                params,
                step: 0,
                m: shapes.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
                v: shapes.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            },
        }
    }

    /// Applies one update in place.
    pub fn apply(&mut self, weights: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        match self {
            OptimState::Sgd => {
                for (w, g) in weights.iter_mut().zip(grads) {
                    w.scaled_add(-lr, g);
                }
            }
            OptimState::Adam { params, step, m, v } => {
                *step += 1;
                let AdamParams { beta1, beta2, eps } = *params;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((w, g), m), v) in weights.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sgd_step() {
        let mut w = vec![array![[1.0, 2.0]]];
        let mut opt = OptimState::new(OptimizerKind::Sgd, AdamParams::default(), &w);
        opt.apply(&mut w, &[array![[0.5, -1.0]]], 0.1);
        assert_eq!(w[0], array![[0.95, 2.1]]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first step is lr · g/(|g| + eps).
        let mut w = vec![array![[0.0, 0.0]]];
        let mut opt = OptimState::new(OptimizerKind::Adam, AdamParams::default(), &w);
        opt.apply(&mut w, &[array![[3.0, -0.2]]], 0.01);
        assert!((w[0][[0, 0]] + 0.01).abs() < 1e-9);
        assert!((w[0][[0, 1]] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut w = vec![array![[5.0]]];
        let mut opt = OptimState::new(OptimizerKind::Adam, AdamParams::default(), &w);
        for _ in 0..2000 {
            let g = vec![&w[0] * 2.0 - 2.0];
            opt.apply(&mut w, &g, 0.05);
        }
        assert!((w[0][[0, 0]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut w = vec![array![[1.5, -2.0]]];
            let mut opt = OptimState::new(kind, AdamParams::default(), &w);
            opt.apply(&mut w, &[array![[0.3, 0.4]]], 0.0);
            assert_eq!(w[0], array![[1.5, -2.0]]);
        }
    }
}
