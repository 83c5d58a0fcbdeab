use std::f64::consts::PI;

use proptest::prelude::*;
use qcnn_core::linalg::Matrix;
use qcnn_core::model::{param_count, represent, ModelConfig, Mode, QcnnModel};
use qcnn_core::basis::Fourier;
use qcnn_core::quantum::contract_score;
use qcnn_core::tape::backward;
use qcnn_core::verify::{random_model, random_pixels};

/// Activations indexed `[sample][site][channel]`.
type Act = Vec<Vec<Vec<f64>>>;

fn reference_represent(pixels: &Matrix, n: usize) -> Act {
    (0..pixels.rows())
        .map(|s| {
            pixels
                .row(s)
                .iter()
                .map(|&x| {
                    (1..=n)
                        .flat_map(|k| {
                            let t = 2.0 * PI * k as f64 * x;
                            [2f64.sqrt() * t.cos(), 2f64.sqrt() * t.sin()]
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Loop-based forward pass. Train mode normalizes with biased batch
/// statistics over samples and sites.
fn reference_forward(model: &QcnnModel, pixels: &Matrix, mode: Mode) -> Vec<Vec<f64>> {
    let mut x = reference_represent(pixels, model.config.cutoff);
    let depth = model.depth();
    for l in 0..=depth {
        let bn = &model.norms[l];
        let channels = x[0][0].len();
        for c in 0..channels {
            let (mean, var) = match mode {
                Mode::Eval => (bn.running_mean[c], bn.running_var[c]),
                Mode::Train => {
                    let vals: Vec<f64> = x.iter().flat_map(|s| s.iter().map(move |p| p[c])).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                    (m, v)
                }
            };
            for s in x.iter_mut() {
                for p in s.iter_mut() {
                    p[c] = bn.scale[(0, c)] * (p[c] - mean) / (var + bn.epsilon).sqrt() + bn.shift[(0, c)];
                }
            }
        }
        let a = &model.convs[l].weight;
        let mapped: Act = x
            .iter()
            .map(|s| {
                s.iter()
                    .map(|p| (0..a.rows()).map(|j| (0..a.cols()).map(|i| a[(j, i)] * p[i]).sum()).collect())
                    .collect()
            })
            .collect();
        x = if l < depth {
            mapped
                .iter()
                .map(|s| s.chunks(2).map(|w| w[0].iter().zip(&w[1]).map(|(u, v)| u * v).collect()).collect())
                .collect()
        } else {
            mapped
        };
    }
    x.into_iter().map(|s| s.into_iter().next().unwrap()).collect()
}

fn reference_loss(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            s.iter()
                .enumerate()
                .map(|(c, v)| (v - if c == y { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / labels.len() as f64
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn param_count_matches_closed_form_at_256_pixels() {
    for d in (2..=40).step_by(2) {
        let cfg = ModelConfig::with_schedule(256, d, "fourier", 10).unwrap();
        assert_eq!(param_count(&cfg), 240 * d * d + 180 * d, "d = {d}");
        assert_eq!(QcnnModel::init(&cfg, 0).unwrap().num_parameters(), param_count(&cfg));
    }
}

#[test]
fn representation_matches_trig_formula() {
    let pixels = Matrix::from_rows(&[&[0.0, 0.3], &[0.71, 1.0]]);
    let fm = represent(&pixels, &Fourier, 3).unwrap();
    let reference = reference_represent(&pixels, 3);
    for s in 0..2 {
        for p in 0..2 {
            for (a, b) in fm.site(s, p).iter().zip(&reference[s][p]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
    assert!(represent(&Matrix::from_rows(&[&[1.2, 0.0]]), &Fourier, 1).is_err());
}

#[test]
fn forward_matches_loop_reference_in_both_modes() {
    let model = random_model(16, 4, 7).unwrap();
    let pixels = random_pixels(5, 16, 8);
    for mode in [Mode::Eval, Mode::Train] {
        let mut m = model.clone();
        let ours = m.forward(&pixels, mode).unwrap();
        let reference = reference_forward(&model, &pixels, mode);
        for (s, row) in reference.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!(rel_close(ours[(s, c)], *v, 1e-12), "{mode:?} sample {s} class {c}");
            }
        }
    }
}

#[test]
fn train_mode_updates_running_statistics_with_unbiased_variance() {
    let model = random_model(4, 2, 9).unwrap();
    let pixels = random_pixels(3, 4, 10);
    let mut m = model.clone();
    m.forward(&pixels, Mode::Train).unwrap();
    let x = reference_represent(&pixels, 1);
    let bn = &model.norms[0];
    for c in 0..2 {
        let vals: Vec<f64> = x.iter().flat_map(|s| s.iter().map(move |p| p[c])).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let unbiased = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let rm = 0.9 * bn.running_mean[c] + 0.1 * mean;
        let rv = 0.9 * bn.running_var[c] + 0.1 * unbiased;
        assert!((m.norms[0].running_mean[c] - rm).abs() < 1e-14);
        assert!((m.norms[0].running_var[c] - rv).abs() < 1e-14);
    }
    let mut e = model.clone();
    e.forward(&pixels, Mode::Eval).unwrap();
    assert_eq!(e, model, "eval mode must not touch running statistics");
}

#[test]
fn tape_gradients_match_central_differences_of_reference_loss() {
    let model = random_model(8, 2, 11).unwrap();
    let pixels = random_pixels(4, 8, 12);
    let labels = [3, 0, 9, 3];
    let mut m = model.clone();
    let (tape, value, _) = m.forward_recorded(&pixels, &labels, Mode::Train).unwrap();
    let reference = reference_loss(&reference_forward(&model, &pixels, Mode::Train), &labels);
    assert!(rel_close(value, reference, 1e-12));
    let grads = backward(&tape, 1.0).unwrap();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut checked = 0;
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.as_slice().len() {
            let orig = probe.params()[p].as_slice()[k];
            probe.params_mut()[p].as_mut_slice()[k] = orig + h;
            let up = reference_loss(&reference_forward(&probe, &pixels, Mode::Train), &labels);
            probe.params_mut()[p].as_mut_slice()[k] = orig - h;
            let down = reference_loss(&reference_forward(&probe, &pixels, Mode::Train), &labels);
            probe.params_mut()[p].as_mut_slice()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = g.as_slice()[k];
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(err < 1e-4, "param {p}[{k}]: tape {analytic:e}, fd {fd:e}");
            checked += 1;
        }
    }
    assert_eq!(checked, model.num_parameters());
}

#[test]
fn eval_gradients_treat_running_statistics_as_constants() {
    let model = random_model(4, 2, 13).unwrap();
    let pixels = random_pixels(3, 4, 14);
    let labels = [1, 2, 3];
    let mut m = model.clone();
    let (tape, _, _) = m.forward_recorded(&pixels, &labels, Mode::Eval).unwrap();
    let grads = backward(&tape, 1.0).unwrap();
    let h = 1e-6;
    let p = QcnnModel::bn_shift_param(1).0;
    let mut probe = model.clone();
    probe.params_mut()[p].as_mut_slice()[0] += h;
    let up = reference_loss(&reference_forward(&probe, &pixels, Mode::Eval), &labels);
    probe.params_mut()[p].as_mut_slice()[0] -= 2.0 * h;
    let down = reference_loss(&reference_forward(&probe, &pixels, Mode::Eval), &labels);
    let fd = (up - down) / (2.0 * h);
    assert!(rel_close(grads.get(QcnnModel::bn_shift_param(1)).as_slice()[0], fd, 1e-6));
}

#[test]
fn contraction_matches_loop_reference() {
    let model = random_model(32, 4, 15).unwrap();
    let pixels = random_pixels(4, 32, 16);
    let reference = reference_forward(&model, &pixels, Mode::Eval);
    let stack = model.export_augmented_tensors();
    for (s, expected) in reference.iter().enumerate() {
        let tn = contract_score(&stack, pixels.row(s)).unwrap();
        let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in tn.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_have_batch_by_class_shape(log_n in 1u32..5, half_d in 1usize..4, batch in 1usize..5, seed in 0u64..100) {
        let n = 1usize << log_n;
        let model = random_model(n, 2 * half_d, seed).unwrap();
        let scores = model.predict(&random_pixels(batch, n, seed + 1)).unwrap();
        prop_assert_eq!(scores.shape(), (batch, 10));
        prop_assert!(scores.is_finite());
    }

    #[test]
    fn predict_is_batch_independent(seed in 0u64..100) {
        let model = random_model(8, 2, seed).unwrap();
        let pixels = random_pixels(4, 8, seed + 7);
        let all = model.predict(&pixels).unwrap();
        for s in 0..4 {
            let one = model.predict(&Matrix::from_vec(1, 8, pixels.row(s).to_vec()).unwrap()).unwrap();
            prop_assert_eq!(one.row(0), all.row(s));
        }
    }
}
