use std::f64::consts::PI;

use nalgebra::DMatrix;
use proptest::prelude::*;
use qcnn_core::linalg::Matrix;
use qcnn_core::model::QcnnModel;
use qcnn_core::quantum::{entanglement_entropy, entropy_of, BruteForceSvd, EntropyMethod, GramRecursion};
use qcnn_core::verify::random_model;

/// Grid points per pixel. Scores are trig polynomials of degree 1 in each
/// pixel, so projections onto degree ≤ 1 modes have integrands of degree ≤ 2
/// and the periodic trapezoid rule on 5 points is exact.
const GRID: usize = 5;

fn augmented_fourier(x: f64) -> [f64; 3] {
    let t = 2.0 * PI * x;
    [1.0, 2f64.sqrt() * t.cos(), 2f64.sqrt() * t.sin()]
}

/// Class amplitudes `⟨f_{i_1}…f_{i_N}|Ψ_y⟩` obtained by integrating the
/// eval-mode scores against the basis, independent of the tensor export.
/// Rows are classes, columns the mixed-radix index with pixel 0 most
/// significant.
fn quadrature_amplitudes(model: &QcnnModel) -> Vec<Vec<f64>> {
    let n = model.config.n_pixels;
    let points = GRID.pow(n as u32);
    let mut pixels = Matrix::zeros(points, n);
    for s in 0..points {
        let mut rest = s;
        for p in (0..n).rev() {
            pixels[(s, p)] = (rest % GRID) as f64 / GRID as f64;
            rest /= GRID;
        }
    }
    let scores = model.predict(&pixels).unwrap();
    let weights: Vec<[f64; 3]> = (0..GRID)
        .map(|m| augmented_fourier(m as f64 / GRID as f64).map(|f| f / GRID as f64))
        .collect();
    (0..scores.cols())
        .map(|y| {
            let mut t: Vec<f64> = (0..points).map(|s| scores[(s, y)]).collect();
            // Contract one grid axis at a time; axis `p` has stride
            // `inner` and the axes before it are already transformed.
            let mut outer = 1;
            for p in 0..n {
                let inner = GRID.pow((n - 1 - p) as u32);
                let mut next = vec![0.0; outer * 3 * inner];
                for o in 0..outer {
                    for m in 0..GRID {
                        for i in 0..3 {
                            let w = weights[m][i];
                            for r in 0..inner {
                                next[(o * 3 + i) * inner + r] += w * t[(o * GRID + m) * inner + r];
                            }
                        }
                    }
                }
                t = next;
                outer *= 3;
            }
            t
        })
        .collect()
}

fn svd_probabilities(amplitudes: &[f64], n_pixels: usize) -> Vec<f64> {
    let side = 3usize.pow((n_pixels / 2) as u32);
    let m = DMatrix::from_row_slice(side, side, amplitudes);
    let mut s: Vec<f64> = m.singular_values().iter().map(|v| v * v).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = s.iter().sum();
    s.iter().map(|v| v / total).collect()
}

fn assert_agree(model: &QcnnModel, label: &str) {
    let stack = model.export_augmented_tensors();
    let gram = GramRecursion.class_spectra(&stack).unwrap();
    let brute = BruteForceSvd.class_spectra(&stack).unwrap();
    let oracle = quadrature_amplitudes(model);
    for (y, amplitudes) in oracle.iter().enumerate() {
        let p = svd_probabilities(amplitudes, model.config.n_pixels);
        let s = entropy_of(&p);
        for (name, spec) in [("gram", &gram[y]), ("brute-force", &brute[y])] {
            let ours = entanglement_entropy(spec);
            assert!((ours - s).abs() < 1e-8, "{label} class {y} {name}: {ours} vs {s}");
            for (k, &q) in p.iter().enumerate() {
                let mine = spec.probabilities.get(k).copied().unwrap_or(0.0);
                assert!((mine - q).abs() < 1e-8, "{label} class {y} {name} p[{k}]: {mine} vs {q}");
            }
        }
    }
}

#[test]
fn spectra_match_quadrature_amplitudes() {
    for n in [2, 4, 8] {
        for seed in 0..4 {
            assert_agree(&random_model(n, 2, 100 * n as u64 + seed).unwrap(), &format!("N={n} seed {seed}"));
        }
    }
}

#[test]
fn fresh_init_spectra_match_quadrature_amplitudes() {
    let cfg = qcnn_core::model::ModelConfig::with_schedule(4, 2, "fourier", 10).unwrap();
    assert_agree(&QcnnModel::init(&cfg, 3).unwrap(), "fresh init");
}

#[test]
fn product_classifier_gives_zero_entropy() {
    // A class row selecting only the constant channel is the vacuum state.
    let mut model = random_model(4, 2, 5).unwrap();
    let cols = model.convs.last().unwrap().weight.cols();
    let last = model.convs.len() - 1;
    model.convs[last].weight = Matrix::zeros(10, cols);
    let mut stack = model.export_augmented_tensors();
    let classifier = stack.layers.last_mut().unwrap();
    for y in 0..10 {
        for c in 0..classifier.cols() {
            classifier[(y, c)] = if c == 0 { 1.0 } else { 0.0 };
        }
    }
    for spec in GramRecursion.class_spectra(&stack).unwrap() {
        assert!(entanglement_entropy(&spec).abs() < 1e-12);
        assert_eq!(spec.rank(), 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spectra_lie_on_the_simplex_below_the_rank_bound(log_n in 1u32..7, half_d in 1usize..4, seed in 0u64..1000) {
        let model = random_model(1 << log_n, 2 * half_d, seed).unwrap();
        let stack = model.export_augmented_tensors();
        let bound = (stack.classifier().cols() as f64).ln();
        for spec in GramRecursion.class_spectra(&stack).unwrap() {
            prop_assert!((spec.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(spec.probabilities.iter().all(|&p| p >= 0.0));
            prop_assert!(spec.rank() <= stack.classifier().cols());
            let s = entanglement_entropy(&spec);
            prop_assert!(s >= 0.0 && s <= bound + 1e-12);
        }
    }

    #[test]
    fn entropy_ignores_classifier_scale(seed in 0u64..1000, factor in 1e-3f64..1e3) {
        let model = random_model(8, 2, seed).unwrap();
        let stack = model.export_augmented_tensors();
        let mut scaled = stack.clone();
        let last = scaled.layers.len() - 1;
        scaled.layers[last].scale(factor);
        let a = GramRecursion.class_spectra(&stack).unwrap();
        let b = GramRecursion.class_spectra(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((entanglement_entropy(x) - entanglement_entropy(y)).abs() < 1e-10);
            prop_assert!((y.log_norm - x.log_norm - 2.0 * factor.ln()).abs() < 1e-9);
        }
    }
}
