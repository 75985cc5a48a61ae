//! Checks the dual coordinate-descent solver against a plain projected-gradient
//! solve of the same box-constrained dual.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rareseek_core::classifier::{self, logistic, ClassifierConfig, ClassifierModel};
use rareseek_core::dataset::Features;
use rareseek_core::SampleId;

/// Minimizes `½ αᵀQα − Σα` over `0 ≤ α ≤ C` with the bias as a constant
/// feature, by projected gradient with step `1/‖Q‖_F`. Returns `(w, b)`.
fn projected_gradient(rows: &[Vec<f64>], y: &[f64], c: f64, iters: usize) -> (Vec<f64>, f64) {
    let aug: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().copied().chain([1.0]).collect())
        .collect();
    let l = aug.len();
    let q: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            (0..l)
                .map(|j| y[i] * y[j] * aug[i].iter().zip(&aug[j]).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect();
    let norm = q.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let step = 1.0 / norm;
    let mut alpha = vec![0.0; l];
    for _ in 0..iters {
        let grad: Vec<f64> = (0..l)
            .map(|i| q[i].iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>() - 1.0)
            .collect();
        for i in 0..l {
            alpha[i] = (alpha[i] - step * grad[i]).clamp(0.0, c);
        }
    }
    let dim = rows[0].len();
    let mut w = vec![0.0; dim + 1];
    for i in 0..l {
        for k in 0..=dim {
            w[k] += alpha[i] * y[i] * aug[i][k];
        }
    }
    let b = w.pop().unwrap();
    (w, b)
}

fn features(rows: &[Vec<f64>]) -> Features {
    let dim = rows[0].len();
    Features::new(dim, rows.iter().flatten().map(|&v| v as f32).collect()).unwrap()
}

fn oracle_margin(w: &[f64], b: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b
}

fn model_margins(model: &ClassifierModel, f: &Features) -> Vec<f64> {
    (0..f.num_rows() as SampleId).map(|id| model.margin(f.row(id))).collect()
}

fn blobs(seed: u64, n: usize, dim: usize, shift: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let pos = i % 2 == 0;
        let s = if pos { shift } else { -shift };
        rows.push((0..dim).map(|_| s + rng.random_range(-1.0..1.0)).collect());
        labels.push(pos);
    }
    (rows, labels)
}

fn tight() -> ClassifierConfig {
    ClassifierConfig {
        tolerance: 1e-6,
        max_epochs: 100_000,
        ..Default::default()
    }
}

#[test]
fn matches_projected_gradient_dual() {
    let (rows, labels) = blobs(1, 16, 3, 0.4);
    let f = features(&rows);
    let examples: Vec<(SampleId, bool)> = labels.iter().enumerate().map(|(i, &y)| (i as SampleId, y)).collect();
    let model = classifier::train_rows(&examples, &f, &tight()).unwrap();
    let y: Vec<f64> = labels.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
    let (w, b) = projected_gradient(&rows, &y, 1.0, 200_000);
    for (x, m) in rows.iter().zip(model_margins(&model, &f)) {
        assert!((oracle_margin(&w, b, x) - m).abs() < 1e-3, "{} vs {m}", oracle_margin(&w, b, x));
    }
}

#[test]
fn duplicate_positive_keeps_boundary() {
    // well separated: no constraint sits at the upper bound C
    let (mut rows, labels) = blobs(2, 12, 2, 2.5);
    let f = features(&rows);
    let examples: Vec<(SampleId, bool)> = labels.iter().enumerate().map(|(i, &y)| (i as SampleId, y)).collect();
    let base = classifier::train_rows(&examples, &f, &tight()).unwrap();

    let mut dup = examples.clone();
    dup.push((0, true));
    let with_dup = classifier::train_rows(&dup, &f, &tight()).unwrap();

    // the oracle agrees that duplicating the row does not move the optimum
    let mut y: Vec<f64> = labels.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
    let (w0, b0) = projected_gradient(&rows, &y, 1.0, 200_000);
    rows.push(rows[0].clone());
    y.push(1.0);
    let (w1, b1) = projected_gradient(&rows, &y, 1.0, 200_000);

    for (i, x) in rows.iter().enumerate().take(12) {
        let (m0, m1) = (base.margin(f.row(i as SampleId)), with_dup.margin(f.row(i as SampleId)));
        assert!((m0 - m1).abs() < 1e-3, "row {i}: {m0} vs {m1}");
        assert!((oracle_margin(&w0, b0, x) - oracle_margin(&w1, b1, x)).abs() < 1e-6);
        assert!((oracle_margin(&w0, b0, x) - m0).abs() < 1e-3);
    }
}

#[test]
fn example_order_does_not_matter() {
    let config = ClassifierConfig::default();
    let (rows, labels) = blobs(3, 40, 5, 0.3);
    let f = features(&rows);
    let examples: Vec<(SampleId, bool)> = labels.iter().enumerate().map(|(i, &y)| (i as SampleId, y)).collect();
    let a = classifier::train_rows(&examples, &f, &config).unwrap();
    let mut shuffled = examples.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let b = classifier::train_rows(&shuffled, &f, &config).unwrap();
    for (ma, mb) in model_margins(&a, &f).into_iter().zip(model_margins(&b, &f)) {
        assert!((ma - mb).abs() <= 10.0 * config.tolerance, "{ma} vs {mb}");
    }
}

fn separable_set() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    (
        -1.0f64..1.0,
        -1.0f64..1.0,
        -0.5f64..0.5,
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..=20),
    )
        .prop_filter_map("need both labels and a gap", |(a, b, c, pts)| {
            let norm = (a * a + b * b).sqrt();
            if norm < 0.1 {
                return None;
            }
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (x, y) in pts {
                let s = (a * x + b * y) / norm + c;
                if s.abs() >= 0.2 {
                    rows.push(vec![x, y]);
                    labels.push(s > 0.0);
                }
            }
            let pos = labels.iter().filter(|&&p| p).count();
            (pos > 0 && pos < labels.len()).then_some((rows, labels))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn separable_sets_are_fit(set in separable_set()) {
        let (rows, labels) = set;
        let f = features(&rows);
        let examples: Vec<(SampleId, bool)> = labels.iter().enumerate().map(|(i, &y)| (i as SampleId, y)).collect();
        let config = ClassifierConfig { c: 1000.0, max_epochs: 100_000, ..Default::default() };
        let model = classifier::train_rows(&examples, &f, &config).unwrap();
        for (i, &p) in labels.iter().enumerate() {
            let m = model.margin(f.row(i as SampleId));
            prop_assert_eq!(m >= 0.0, p, "row {} margin {}", i, m);
        }
    }

    #[test]
    fn score_threshold_matches_margin_sign(m in -50.0f64..50.0) {
        prop_assert_eq!(logistic(m) >= 0.5, m >= 0.0);
        prop_assert!((0.0..=1.0).contains(&logistic(m)));
    }

    #[test]
    fn tiny_negative_margins_stay_negative(e in -300i32..-1) {
        let m = -(10f64.powi(e));
        prop_assert!(logistic(m) < 0.5);
    }
}
