//! Self-checks of the numerical contracts: forward pass against tensor
//! contraction, Gram recursion against explicit amplitudes, analytic
//! gradients against finite differences, and basis/spectrum invariants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{basis_by_name, dirichlet_kernel, LocalBasis, BASIS_NAMES};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{classify, ModelConfig, Mode, QcnnModel};
use crate::quantum::{
    conditional_prob, contract_score, entanglement_entropy, gram_ascend, gram_base, psd_margin, BruteForceSvd,
    EntropyMethod, GramRecursion,
};
use crate::tape::backward;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::Input(format!("unknown verify level `{other}` (fast|full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    /// Records the outcome of a fallible check; an error counts as a failure.
    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        match outcome {
            Ok((passed, detail)) => self.push(name, passed, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

pub const CONTRACTION_TOL: f64 = 1e-10;
pub const SPECTRUM_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Fourier model with the default schedule and randomized batch-norm
/// parameters and running statistics, so the exported tensors have a
/// non-trivial constant channel.
pub fn random_model(n_pixels: usize, d: usize, seed: u64) -> Result<QcnnModel> {
    let cfg = ModelConfig::with_schedule(n_pixels, d, "fourier", 10)?;
    let mut model = QcnnModel::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for bn in &mut model.norms {
        for v in bn.scale.as_mut_slice() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.shift.as_mut_slice() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in &mut bn.running_mean {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in &mut bn.running_var {
            *v = rng.gen_range(0.5..1.5);
        }
    }
    Ok(model)
}

/// `count × n_pixels` matrix of uniform pixels in `[0, 1]`.
pub fn random_pixels(count: usize, n_pixels: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count * n_pixels).map(|_| rng.gen_range(0.0..=1.0)).collect();
    Matrix::from_vec(count, n_pixels, data).expect("sized")
}

/// Largest `‖α_fwd − α_tn‖∞ / ‖α_fwd‖∞` over the rows of `pixels`. With
/// `perturb`, entry (1, 1) of the first exported tensor is shifted first.
pub fn forward_vs_contraction(model: &QcnnModel, pixels: &Matrix, perturb: Option<f64>) -> Result<f64> {
    let scores = model.predict(pixels)?;
    let mut stack = model.export_augmented_tensors();
    if let Some(delta) = perturb {
        stack.layers[0][(1, 1)] += delta;
    }
    let mut worst: f64 = 0.0;
    for b in 0..pixels.rows() {
        let tn = contract_score(&stack, pixels.row(b))?;
        let fwd = scores.row(b);
        let scale = fwd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = fwd.iter().zip(&tn).fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
        worst = worst.max(diff / scale.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumAgreement {
    pub entropy: f64,
    pub probability: f64,
}

/// Largest entropy and Schmidt-probability differences between the Gram
/// recursion and explicit amplitudes, over all classes.
pub fn gram_vs_brute_force(model: &QcnnModel) -> Result<SpectrumAgreement> {
    let stack = model.export_augmented_tensors();
    let gram = GramRecursion.class_spectra(&stack)?;
    let brute = BruteForceSvd.class_spectra(&stack)?;
    let mut out = SpectrumAgreement {
        entropy: 0.0,
        probability: 0.0,
    };
    for (g, b) in gram.iter().zip(&brute) {
        out.entropy = out.entropy.max((entanglement_entropy(g) - entanglement_entropy(b)).abs());
        let len = g.probabilities.len().max(b.probabilities.len());
        for i in 0..len {
            let pg = g.probabilities.get(i).copied().unwrap_or(0.0);
            let pb = b.probabilities.get(i).copied().unwrap_or(0.0);
            out.probability = out.probability.max((pg - pb).abs());
        }
    }
    Ok(out)
}

/// Largest `|g − fd| / max(|g|, |fd|, floor)` over every parameter, with
/// central differences of the train-mode loss at step `h`.
pub fn gradient_check(
    model: &QcnnModel,
    pixels: &Matrix,
    labels: &[usize],
    h: f64,
    floor: f64,
) -> Result<f64> {
    let mut m = model.clone();
    let (tape, _, _) = m.forward_recorded(pixels, labels, Mode::Train)?;
    let grads = backward(&tape, 1.0)?;
    let loss_at = |probe: &QcnnModel| -> Result<f64> {
        let mut probe = probe.clone();
        Ok(probe.forward_recorded(pixels, labels, Mode::Train)?.1)
    };
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.as_slice().len() {
            let orig = probe.params()[p].as_slice()[k];
            probe.params_mut()[p].as_mut_slice()[k] = orig + h;
            let up = loss_at(&probe)?;
            probe.params_mut()[p].as_mut_slice()[k] = orig - h;
            let down = loss_at(&probe)?;
            probe.params_mut()[p].as_mut_slice()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = g.as_slice()[k];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(points: usize) -> (Vec<f64>, Vec<f64>) {
    let n = points;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
            let step = p1 / dp;
            t -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - t);
        weights[i] = 1.0 / ((1.0 - t * t) * dp * dp);
    }
    (nodes, weights)
}

/// `max |∫₀¹ f_i f_j − δ_ij|` over the augmented basis, by composite
/// Gauss–Legendre quadrature.
pub fn quadrature_orthonormality(basis: &dyn LocalBasis, cutoff: usize) -> f64 {
    let dim = basis.channels(cutoff) + 1;
    let (nodes, weights) = gauss_legendre(24);
    let panels = 16;
    let mut gram = vec![0.0; dim * dim];
    let mut f = vec![0.0; dim];
    for p in 0..panels {
        let (lo, width) = (p as f64 / panels as f64, 1.0 / panels as f64);
        for (&t, &w) in nodes.iter().zip(&weights) {
            basis.eval_augmented(lo + width * t, cutoff, &mut f);
            for i in 0..dim {
                for j in 0..dim {
                    gram[i * dim + j] += width * w * f[i] * f[j];
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[i * dim + j] - target).abs());
        }
    }
    worst
}

struct Sizes {
    contraction: (usize, usize, usize),
    brute_force: &'static [usize],
    gradient: usize,
}

/// Runs every suite at the given level. `perturb` shifts one exported
/// tensor entry before the contraction comparison.
pub fn run_verify(level: Level, perturb: Option<f64>) -> VerifyReport {
    let sizes = match level {
        Level::Fast => Sizes {
            contraction: (16, 4, 10),
            brute_force: &[2, 4],
            gradient: 4,
        },
        Level::Full => Sizes {
            contraction: (256, 8, 100),
            brute_force: &[2, 4, 8],
            gradient: 8,
        },
    };
    let mut report = VerifyReport::default();

    let (n, d, count) = sizes.contraction;
    report.record(
        "forward = contraction",
        (|| {
            let model = random_model(n, d, 11)?;
            let err = forward_vs_contraction(&model, &random_pixels(count, n, 12), perturb)?;
            Ok((
                err <= CONTRACTION_TOL,
                format!("N={n} d={d} {count} inputs, max rel err {err:.3e} (tol {CONTRACTION_TOL:e})"),
            ))
        })(),
    );

    for &n in sizes.brute_force {
        report.record(
            &format!("gram recursion = amplitude svd (N={n})"),
            (|| {
                let mut worst = SpectrumAgreement {
                    entropy: 0.0,
                    probability: 0.0,
                };
                for seed in 0..5 {
                    let a = gram_vs_brute_force(&random_model(n, 2, 100 + seed)?)?;
                    worst.entropy = worst.entropy.max(a.entropy);
                    worst.probability = worst.probability.max(a.probability);
                }
                Ok((
                    worst.entropy <= SPECTRUM_TOL && worst.probability <= SPECTRUM_TOL,
                    format!(
                        "5 models, max |ΔS| {:.3e}, max |Δp| {:.3e} (tol {SPECTRUM_TOL:e})",
                        worst.entropy, worst.probability
                    ),
                ))
            })(),
        );
    }

    let n = sizes.gradient;
    report.record(
        "gradients = finite differences",
        (|| {
            let model = random_model(n, 2, 21)?;
            let pixels = random_pixels(6, n, 22);
            let labels: Vec<usize> = (0..6).map(|i| (3 * i + 1) % 10).collect();
            let err = gradient_check(&model, &pixels, &labels, GRADIENT_STEP, 1e-8)?;
            Ok((
                err <= GRADIENT_TOL,
                format!("N={n} d=2, {} parameters, max rel err {err:.3e} (tol {GRADIENT_TOL:e})", model.num_parameters()),
            ))
        })(),
    );

    for name in BASIS_NAMES {
        report.record(
            &format!("quadrature orthonormality ({name})"),
            (|| {
                let basis = basis_by_name(name)?;
                let worst = (1..=5).map(|c| quadrature_orthonormality(basis.as_ref(), c)).fold(0.0, f64::max);
                Ok((
                    worst <= QUADRATURE_TOL,
                    format!("cutoff 1..=5, max |⟨f_i,f_j⟩ − δ_ij| {worst:.3e}"),
                ))
            })(),
        );
    }

    let worst = (1..=10)
        .map(|n| (dirichlet_kernel(n, 0.0) - (2 * n + 1) as f64).abs())
        .fold(0.0, f64::max);
    report.push(
        "dirichlet kernel D_n(0) = 2n+1",
        worst <= 1e-12,
        format!("n = 1..=10, max deviation {worst:.3e}"),
    );

    report.record("schmidt simplex and entropy bound", simplex_and_bound());
    report.record("classify scale invariance", scale_invariance());
    report.record("gram PSD preservation", psd_preservation());
    report
}

fn simplex_and_bound() -> Result<(bool, String)> {
    let (mut sum_err, mut min_p, mut excess) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..5 {
        let model = random_model(16, 4, 300 + seed)?;
        let stack = model.export_augmented_tensors();
        let bound = (stack.classifier().cols() as f64).ln();
        for s in GramRecursion.class_spectra(&stack)? {
            sum_err = sum_err.max((s.probabilities.iter().sum::<f64>() - 1.0).abs());
            min_p = min_p.min(s.probabilities.iter().copied().fold(f64::INFINITY, f64::min));
            excess = excess.max(entanglement_entropy(&s) - bound);
        }
    }
    Ok((
        sum_err <= 1e-12 && min_p >= 0.0 && excess <= 1e-12,
        format!("|Σp − 1| ≤ {sum_err:.1e}, min p {min_p:.1e}, max S − log(d_L+1) {excess:.3e}"),
    ))
}

fn scale_invariance() -> Result<(bool, String)> {
    let model = random_model(16, 4, 400)?;
    let scores = model.predict(&random_pixels(20, 16, 401))?;
    let mut changed = 0;
    let mut prob_err: f64 = 0.0;
    for b in 0..scores.rows() {
        let row = scores.row(b);
        let p = conditional_prob(row)?;
        for c in [1e-3, 0.7, 5.0, 1e4] {
            let scaled: Vec<f64> = row.iter().map(|v| v * c).collect();
            changed += usize::from(classify(&scaled) != classify(row));
            let q = conditional_prob(&scaled)?;
            prob_err = prob_err.max(p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok((
        changed == 0 && prob_err <= 1e-14,
        format!("80 scalings, {changed} label changes, max |Δp(y|x)| {prob_err:.1e}"),
    ))
}

fn psd_preservation() -> Result<(bool, String)> {
    let mut worst = f64::INFINITY;
    for seed in 0..3 {
        let model = random_model(64, 4, 500 + seed)?;
        let stack = model.export_augmented_tensors();
        let basis = basis_by_name(&stack.basis)?;
        let mut g = gram_base(basis.as_ref(), stack.cutoff);
        for layer in &stack.layers[..stack.depth()] {
            g = gram_ascend(&g, layer)?;
            worst = worst.min(psd_margin(&g)?);
        }
    }
    Ok((
        worst >= -1e-12,
        format!("N=64, smallest λ_min/λ_max over all levels {worst:.3e}"),
    ))
}
