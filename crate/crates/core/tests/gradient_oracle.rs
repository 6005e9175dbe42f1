//! Analytic gradients against central finite differences of a loss computed
//! with plain loops, independently of the library's design matrices.

use mtlinear::data::WindowBatch;
use mtlinear::loss::{analytic_gradient, error_matrix, penalty_weights, weighted_loss, PenaltyWeights};
use mtlinear::models::{LinearHead, Variant};
use ndarray::{Array2, Array3};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-6;

fn padded_mean(x: &[f64], kernel: usize) -> Vec<f64> {
    let half = (kernel - 1) / 2;
    let mut padded = vec![x[0]; half];
    padded.extend_from_slice(x);
    padded.extend(std::iter::repeat_n(x[x.len() - 1], half));
    (0..x.len())
        .map(|t| padded[t..t + kernel].iter().sum::<f64>() / kernel as f64)
        .collect()
}

/// Forecast of one variate for one window.
fn naive_forecast(head: &LinearHead, x: &[f64]) -> Vec<f64> {
    let l = x.len();
    let bias = if head.bias { 1.0 } else { 0.0 };
    let apply = |theta: &Array2<f64>, z: &[f64], j: usize| -> f64 {
        let mut acc = bias * theta[[l, j]];
        for t in 0..l {
            acc += z[t] * theta[[t, j]];
        }
        acc
    };
    (0..head.horizon)
        .map(|j| match head.variant {
            Variant::Linear => apply(&head.weights[0], x, j),
            Variant::NLinear => {
                let last = x[l - 1];
                let z: Vec<f64> = x.iter().map(|v| v - last).collect();
                apply(&head.weights[0], &z, j) + last
            }
            Variant::DLinear => {
                let trend = padded_mean(x, head.ma_kernel);
                let rem: Vec<f64> = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
                apply(&head.weights[0], &trend, j) + apply(&head.weights[1], &rem, j)
            }
            Variant::RLinear => {
                let mean = x.iter().sum::<f64>() / l as f64;
                let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64).sqrt() + 1e-5;
                let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
                sd * apply(&head.weights[0], &z, j) + mean
            }
        })
        .collect()
}

fn naive_loss(head: &LinearHead, batch: &WindowBatch, w: &Array2<f64>) -> f64 {
    let (b, l, k) = batch.lookbacks.dim();
    let h = head.horizon;
    let mut total = 0.0;
    for n in 0..b {
        for i in 0..k {
            let x: Vec<f64> = (0..l).map(|t| batch.lookbacks[[n, t, i]]).collect();
            let pred = naive_forecast(head, &x);
            for j in 0..h {
                let r = pred[j] - batch.targets[[n, j, i]];
                total += w[[i, j]] * r * r;
            }
        }
    }
    total / (k * h * b) as f64
}

fn random_instance(variant: Variant, rng: &mut ChaCha8Rng) -> (LinearHead, WindowBatch) {
    let l = rng.gen_range(3..9);
    let h = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let b = rng.gen_range(1..6);
    let u = Uniform::new(-1.0, 1.0);
    let weights = (0..variant.num_blocks())
        .map(|_| Array2::from_shape_fn((l + 1, h), |_| u.sample(rng)))
        .collect();
    let mut head = LinearHead::with_weights(variant, weights).unwrap();
    head.ma_kernel = [1, 3, 5][rng.gen_range(0..3)];
    head.bias = rng.gen_bool(0.8);
    let scale = rng.gen_range(0.5..3.0);
    let batch = WindowBatch {
        lookbacks: Array3::from_shape_fn((b, l, k), |_| scale * u.sample(rng)),
        targets: Array3::from_shape_fn((b, h, k), |_| scale * u.sample(rng)),
        starts: (0..b).collect(),
    };
    (head, batch)
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-4)
}

#[test]
fn naive_loss_agrees_with_library_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in Variant::ALL {
        for _ in 0..20 {
            let (head, batch) = random_instance(variant, &mut rng);
            let w = penalty_weights(&error_matrix(&head, &batch).unwrap(), 1.5);
            let lib = weighted_loss(&head, &batch, &w).unwrap();
            let naive = naive_loss(&head, &batch, &w.w);
            assert!((lib - naive).abs() <= 1e-10 * naive.abs().max(1.0), "{variant}: {lib} vs {naive}");
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for variant in Variant::ALL {
        let mut worst = 0.0f64;
        for _ in 0..30 {
            let (head, batch) = random_instance(variant, &mut rng);
            let a = rng.gen_range(0.0..2.0);
            let w = penalty_weights(&error_matrix(&head, &batch).unwrap(), a);
            let grad = analytic_gradient(&head, &batch, &w).unwrap();
            for (m, gm) in grad.iter().enumerate() {
                for ((r, c), &g) in gm.indexed_iter() {
                    let mut plus = head.clone();
                    plus.weights[m][[r, c]] += FD_STEP;
                    let mut minus = head.clone();
                    minus.weights[m][[r, c]] -= FD_STEP;
                    let fd = (naive_loss(&plus, &batch, &w.w) - naive_loss(&minus, &batch, &w.w)) / (2.0 * FD_STEP);
                    worst = worst.max(rel_err(g, fd));
                }
            }
        }
        assert!(worst < 1e-5, "{variant}: worst relative error {worst}");
    }
}

#[test]
fn disabled_bias_has_zero_bias_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for variant in Variant::ALL {
        let (mut head, batch) = random_instance(variant, &mut rng);
        head.bias = false;
        let grad = analytic_gradient(&head, &batch, &PenaltyWeights::ones(batch.width(), head.horizon)).unwrap();
        let l = head.lookback;
        for g in grad {
            assert!(g.row(l).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn weighted_loss_is_convex_along_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for variant in Variant::ALL {
        for _ in 0..10 {
            let (p, batch) = random_instance(variant, &mut rng);
            let mut q = p.clone();
            for w in &mut q.weights {
                w.mapv_inplace(|v| v + rng.gen_range(-2.0..2.0));
            }
            let w = penalty_weights(&error_matrix(&p, &batch).unwrap(), 1.0);
            let f = |t: f64| {
                let mut m = p.clone();
                for (dst, (a, b)) in m.weights.iter_mut().zip(p.weights.iter().zip(&q.weights)) {
                    *dst = a * (1.0 - t) + b * t;
                }
                weighted_loss(&m, &batch, &w).unwrap()
            };
            let (f0, f1) = (f(0.0), f(1.0));
            for i in 1..10 {
                let t = i as f64 / 10.0;
                assert!(f(t) <= (1.0 - t) * f0 + t * f1 + 1e-12 * (f0 + f1));
            }
        }
    }
}
