//! The quantum-state view of a trained network.
//!
//! Each class row of the classifier defines a state `|Ψ_y⟩` on
//! `H_loc^{⊗N}` whose wavefunction at an image is the class score. The
//! entanglement entropy across the top pooling cut is computed from the
//! Gram matrices of subtree states, propagated level by level:
//!
//! ```text
//! H_ℓ     = ã^(ℓ) G_ℓ ã^(ℓ)ᵀ      inner products of the pre-pool channel states
//! G_{ℓ+1} = H_ℓ ⊙ H_ℓ            product pooling of two identical subtrees
//! ```
//!
//! With weight sharing the two halves of the top cut carry the same channel
//! states `|ξ_I⟩`, so `|Ψ_y⟩ = Σ_I a_{yI} |ξ_I⟩ ⊗ |ξ_I⟩` and the reduced
//! density matrix has coefficient operator `C = (a aᵀ) ⊙ H_{L−1}` acting in
//! the non-orthogonal basis `|ξ_I⟩`. Its spectrum is that of `Lᵀ C L` with
//! `H_{L−1} = L Lᵀ`.
//!
//! Gram matrices are stored as per-channel log-norms plus a correlation
//! matrix; the raw entries span far more than the range of `f64`.

use serde::{Deserialize, Serialize};

use crate::basis::{basis_by_name, LocalBasis};
use crate::data::FlattenOrder;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, congruence, matmul, matmul_transa, singular_values, sym_eigenvalues, Matrix, DEFAULT_JITTER};
use crate::model::{AugmentedTensorStack, QcnnModel};

/// Schmidt weights below this fraction of the largest are treated as zero.
pub const EIGENVALUE_FLOOR: f64 = 1e-14;

/// Largest amplitude array the brute-force oracle will build, per class.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

/// Inner products `⟨φ_I|φ_J⟩ = n_I n_J R_IJ` of subtree states, stored as
/// log-norms `ln n_I` and the unit-diagonal correlation matrix `R`.
///
/// Norms of different channels drift apart by hundreds of orders of
/// magnitude over a deep tree, while `R` only gets better conditioned
/// (pooling squares it entrywise), so the two are kept separately.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub level: usize,
    correlation: Matrix,
    /// `ln n_I`; `−∞` marks an exactly zero state.
    log_norms: Vec<f64>,
}

impl GramMatrix {
    /// From explicit inner products.
    pub fn new(level: usize, entries: Matrix) -> Result<Self> {
        if entries.rows() != entries.cols() {
            return Err(Error::Shape(format!(
                "Gram matrix must be square, got {:?}",
                entries.shape()
            )));
        }
        if let Some(i) = (0..entries.rows()).find(|&i| !(entries[(i, i)] >= 0.0)) {
            return Err(Error::Contract(format!(
                "Gram diagonal entry {i} is {}",
                entries[(i, i)]
            )));
        }
        let offsets = vec![0.0; entries.rows()];
        Ok(Self::from_scaled(level, entries, &offsets))
    }

    /// True inner products `exp(o_I + o_J) K_IJ`.
    fn from_scaled(level: usize, k: Matrix, log_offsets: &[f64]) -> Self {
        let n = k.rows();
        let mut log_norms = vec![f64::NEG_INFINITY; n];
        let mut inv = vec![0.0; n];
        for i in 0..n {
            let kii = k[(i, i)];
            if kii > 0.0 && log_offsets[i].is_finite() {
                log_norms[i] = log_offsets[i] + 0.5 * kii.ln();
                inv[i] = 1.0 / kii.sqrt();
            }
        }
        let mut correlation = k;
        for i in 0..n {
            for j in 0..n {
                correlation[(i, j)] *= inv[i] * inv[j];
            }
            correlation[(i, i)] = 1.0;
        }
        Self {
            level,
            correlation,
            log_norms,
        }
    }

    pub fn size(&self) -> usize {
        self.correlation.rows()
    }

    /// `R_IJ = ⟨φ_I|φ_J⟩ / (n_I n_J)`, with `R_II = 1` even for zero states.
    pub fn correlation(&self) -> &Matrix {
        &self.correlation
    }

    pub fn log_norms(&self) -> &[f64] {
        &self.log_norms
    }

    /// The true inner products. Under- or overflows for deep networks.
    pub fn inner_products(&self) -> Matrix {
        let n = self.size();
        let mut m = self.correlation.clone();
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] *= (self.log_norms[i] + self.log_norms[j]).exp();
            }
        }
        m
    }
}

/// Level-0 Gram matrix: the identity on the augmented local basis
/// (constant channel first), by orthonormality.
pub fn gram_base(basis: &dyn LocalBasis, cutoff: usize) -> GramMatrix {
    let n = basis.channels(cutoff) + 1;
    GramMatrix {
        level: 0,
        correlation: Matrix::identity(n),
        log_norms: vec![0.0; n],
    }
}

/// Rows of `v` rescaled by `exp(−m_j)` where `v_ji = x_ji · exp(l_i)` and
/// `m_j` is the row's largest log-magnitude. Zero rows get `m_j = −∞`.
fn log_scaled_rows(x: &Matrix, log_weights: &[f64]) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut offsets = vec![f64::NEG_INFINITY; x.rows()];
    for j in 0..x.rows() {
        let row = x.row(j);
        let m = row
            .iter()
            .zip(log_weights)
            .filter(|(v, l)| **v != 0.0 && l.is_finite())
            .map(|(v, l)| v.abs().ln() + l)
            .fold(f64::NEG_INFINITY, f64::max);
        if m.is_finite() {
            for (i, (v, l)) in row.iter().zip(log_weights).enumerate() {
                if l.is_finite() {
                    out[(j, i)] = v * (l - m).exp();
                }
            }
        }
        offsets[j] = m;
    }
    (out, offsets)
}

/// `H = ã G ãᵀ`: Gram matrix of the channel states after the level-`ℓ`
/// linear map, before pooling.
pub fn half_gram(g: &GramMatrix, layer: &Matrix) -> Result<GramMatrix> {
    if layer.cols() != g.size() {
        return Err(Error::Shape(format!(
            "layer with {} inputs applied to Gram matrix of size {}",
            layer.cols(),
            g.size()
        )));
    }
    let (b, offsets) = log_scaled_rows(layer, &g.log_norms);
    let k = congruence(&b, &g.correlation)?;
    Ok(GramMatrix::from_scaled(g.level, k, &offsets))
}

/// `G' = H ⊙ H` with `H = ã G ãᵀ`.
pub fn gram_ascend(g: &GramMatrix, layer: &Matrix) -> Result<GramMatrix> {
    let h = half_gram(g, layer)?;
    Ok(GramMatrix {
        level: g.level + 1,
        correlation: h.correlation.hadamard(&h.correlation)?,
        log_norms: h.log_norms.iter().map(|l| 2.0 * l).collect(),
    })
}

/// Gram matrix of the two inputs of the top pooling node.
pub fn top_half_gram(stack: &AugmentedTensorStack) -> Result<GramMatrix> {
    let basis = basis_by_name(&stack.basis)?;
    let depth = stack.depth();
    let mut g = gram_base(basis.as_ref(), stack.cutoff);
    for layer in &stack.layers[..depth - 1] {
        g = gram_ascend(&g, layer)?;
    }
    half_gram(&g, &stack.layers[depth - 1])
}

/// Class weights `b_I ∝ a_I n_I²` rescaled to unit maximum, and the log of
/// the scale removed. The top-cut problem in the basis `|ξ_I⟩ / n_I` has
/// coefficients `b_I b_J R_IJ` and metric `R`.
fn weighted_row(row: &[f64], h: &GramMatrix) -> Result<(Vec<f64>, f64)> {
    if row.len() != h.size() {
        return Err(Error::Shape(format!(
            "class row of length {} against Gram matrix of size {}",
            row.len(),
            h.size()
        )));
    }
    let m = Matrix::from_vec(1, row.len(), row.to_vec())?;
    let doubled: Vec<f64> = h.log_norms.iter().map(|l| 2.0 * l).collect();
    let (b, offsets) = log_scaled_rows(&m, &doubled);
    Ok((b.into_vec(), offsets[0]))
}

/// `ln Z` where `Z = ⟨Ψ_y|Ψ_y⟩ = Σ_{IJ} a_I a_J H_IJ²`.
pub fn log_network_norm(row: &[f64], h: &GramMatrix) -> Result<f64> {
    let (b, offset) = weighted_row(row, h)?;
    let r = &h.correlation;
    let mut z = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            z += b[i] * b[j] * r[(i, j)] * r[(i, j)];
        }
    }
    let l1: f64 = b.iter().map(|v| v.abs()).sum();
    if !offset.is_finite() || !(z > 1e-30 * l1 * l1) {
        return Err(Error::Degenerate(format!(
            "network state has relative norm² {z:e} (weight ℓ1 norm {l1:e})"
        )));
    }
    Ok(z.ln() + 2.0 * offset)
}

/// `Z = ⟨Ψ_y|Ψ_y⟩`. Under- or overflows for large networks; prefer
/// [`log_network_norm`] there.
pub fn network_norm(row: &[f64], h: &GramMatrix) -> Result<f64> {
    log_network_norm(row, h).map(f64::exp)
}

/// Eigenvalues of the reduced density matrix across the top cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchmidtSpectrum {
    /// `p_i`, descending, summing to 1.
    pub probabilities: Vec<f64>,
    /// `ln Z`; the unnormalized eigenvalues are `m_i = p_i · Z`.
    pub log_norm: f64,
}

impl SchmidtSpectrum {
    fn from_weights(mut weights: Vec<f64>, log_norm: f64) -> Result<Self> {
        weights.sort_by(|a, b| b.total_cmp(a));
        let max = weights.first().copied().unwrap_or(0.0);
        if !(max > 0.0) {
            return Err(Error::Degenerate("no positive Schmidt weight".into()));
        }
        for w in weights.iter_mut() {
            if *w < EIGENVALUE_FLOOR * max {
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        let probabilities = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            probabilities,
            log_norm,
        })
    }

    pub fn unnormalized(&self) -> Vec<f64> {
        let z = self.log_norm.exp();
        self.probabilities.iter().map(|p| p * z).collect()
    }

    pub fn rank(&self) -> usize {
        self.probabilities.iter().filter(|&&p| p > 0.0).count()
    }
}

/// Schmidt spectrum of `Σ_I a_I |ξ_I⟩⊗|ξ_I⟩` given `H = ⟨ξ_I|ξ_J⟩`.
pub fn schmidt_spectrum(row: &[f64], h: &GramMatrix) -> Result<SchmidtSpectrum> {
    let log_norm = log_network_norm(row, h)?;
    let (b, _) = weighted_row(row, h)?;
    let n = b.len();
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = b[i] * b[j] * h.correlation[(i, j)];
        }
    }
    let l = cholesky(&h.correlation, DEFAULT_JITTER)?;
    // Lᵀ C L
    let cl = matmul(&c, &l)?;
    let mut k = matmul_transa(&l, &cl)?;
    crate::linalg::symmetrize(&mut k);
    SchmidtSpectrum::from_weights(sym_eigenvalues(&k)?, log_norm)
}

/// Von Neumann entropy `−Σ p log p` in nats, with `0 log 0 = 0`.
pub fn entanglement_entropy(spectrum: &SchmidtSpectrum) -> f64 {
    entropy_of(&spectrum.probabilities)
}

pub fn entropy_of(probabilities: &[f64]) -> f64 {
    probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Explicit amplitudes `Ψ_{y,i}` over all `(d_0+1)^N` basis strings, one
/// class per row. Site 0 is the most significant digit of the column index,
/// so the first `N/2` sites index the rows of the bipartition reshape.
pub fn brute_force_state(stack: &AugmentedTensorStack) -> Result<Matrix> {
    let basis = basis_by_name(&stack.basis)?;
    let local = basis.channels(stack.cutoff) + 1;
    let total = (local as f64).powi(stack.n_pixels as i32);
    if total > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::TooLarge(format!(
            "{local}^{} = {total:e} amplitudes exceeds {BRUTE_FORCE_LIMIT}",
            stack.n_pixels
        )));
    }
    let depth = stack.depth();
    let mut states = Matrix::identity(local);
    for layer in &stack.layers[..depth] {
        let mapped = matmul(layer, &states)?;
        let width = mapped.cols();
        let mut pooled = Matrix::zeros(mapped.rows(), width * width);
        for j in 0..mapped.rows() {
            let xi = mapped.row(j);
            let out = pooled.row_mut(j);
            for (a, &l) in xi.iter().enumerate() {
                for (b, &r) in xi.iter().enumerate() {
                    out[a * width + b] = l * r;
                }
            }
        }
        states = pooled;
    }
    matmul(&stack.layers[depth], &states)
}

/// Schmidt spectrum of one class amplitude vector reshaped across the top
/// cut, from the singular values of the `D^{N/2} × D^{N/2}` matrix.
pub fn amplitude_spectrum(amplitudes: &[f64], n_pixels: usize) -> Result<SchmidtSpectrum> {
    let side = (amplitudes.len() as f64).sqrt().round() as usize;
    if side * side != amplitudes.len() || !n_pixels.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "{} amplitudes do not form a square bipartition",
            amplitudes.len()
        )));
    }
    let m = Matrix::from_vec(side, side, amplitudes.to_vec())?;
    let weights: Vec<f64> = singular_values(&m).iter().map(|s| s * s).collect();
    let z: f64 = amplitudes.iter().map(|a| a * a).sum();
    if !(z > 0.0) {
        return Err(Error::Degenerate("zero amplitude vector".into()));
    }
    SchmidtSpectrum::from_weights(weights, z.ln())
}

/// `α_y = ⟨x|Ψ_y⟩` by contracting the represented input up the tree.
pub fn contract_score(stack: &AugmentedTensorStack, pixels: &[f64]) -> Result<Vec<f64>> {
    if pixels.len() != stack.n_pixels {
        return Err(Error::Shape(format!(
            "{} pixels for a network over {}",
            pixels.len(),
            stack.n_pixels
        )));
    }
    let basis = basis_by_name(&stack.basis)?;
    let local = basis.channels(stack.cutoff) + 1;
    let mut nodes: Vec<Vec<f64>> = pixels
        .iter()
        .map(|&x| {
            let mut v = vec![0.0; local];
            basis.eval_augmented(x, stack.cutoff, &mut v);
            v
        })
        .collect();
    let depth = stack.depth();
    for layer in &stack.layers[..depth] {
        let mapped: Vec<Vec<f64>> = nodes.iter().map(|v| apply(layer, v)).collect();
        nodes = mapped
            .chunks(2)
            .map(|pair| pair[0].iter().zip(&pair[1]).map(|(a, b)| a * b).collect())
            .collect();
    }
    Ok(apply(&stack.layers[depth], &nodes[0]))
}

fn apply(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `p(y|x) = α_y² / Σ α²`.
pub fn conditional_prob(scores: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = scores.iter().map(|a| a * a).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(
            "conditional probability undefined for all-zero scores".into(),
        ));
    }
    Ok(scores.iter().map(|a| a * a / total).collect())
}

/// A way of obtaining per-class Schmidt spectra from exported tensors.
pub trait EntropyMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn class_spectra(&self, stack: &AugmentedTensorStack) -> Result<Vec<SchmidtSpectrum>>;
}

/// Polynomial-cost Gram recursion; usable at any size.
#[derive(Clone, Copy, Debug, Default)]
pub struct GramRecursion;

impl EntropyMethod for GramRecursion {
    fn name(&self) -> &'static str {
        "gram"
    }

    fn class_spectra(&self, stack: &AugmentedTensorStack) -> Result<Vec<SchmidtSpectrum>> {
        let h = top_half_gram(stack)?;
        let classifier = stack.classifier();
        (0..classifier.rows())
            .map(|y| schmidt_spectrum(classifier.row(y), &h))
            .collect()
    }
}

/// Materializes every amplitude and takes singular values; small `N` only.
#[derive(Clone, Copy, Debug, Default)]
pub struct BruteForceSvd;

impl EntropyMethod for BruteForceSvd {
    fn name(&self) -> &'static str {
        "brute-force"
    }

    fn class_spectra(&self, stack: &AugmentedTensorStack) -> Result<Vec<SchmidtSpectrum>> {
        let psi = brute_force_state(stack)?;
        (0..psi.rows())
            .map(|y| amplitude_spectrum(psi.row(y), stack.n_pixels))
            .collect()
    }
}

pub const ENTROPY_METHODS: &[&str] = &["gram", "brute-force"];

pub fn entropy_method_by_name(name: &str) -> Result<Box<dyn EntropyMethod>> {
    match name {
        "gram" => Ok(Box::new(GramRecursion)),
        "brute-force" => Ok(Box::new(BruteForceSvd)),
        other => Err(Error::Input(format!(
            "unknown entropy method `{other}` (available: {})",
            ENTROPY_METHODS.join(", ")
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EEReport {
    pub method: String,
    pub bipartition: FlattenOrder,
    pub epoch: Option<usize>,
    /// `S_y` in nats, one per class.
    pub per_class: Vec<f64>,
    pub average: f64,
    /// `log(d_L + 1)`, the Schmidt-rank bound.
    pub bound: f64,
}

pub fn ee_report_with(
    method: &dyn EntropyMethod,
    stack: &AugmentedTensorStack,
    bipartition: FlattenOrder,
    epoch: Option<usize>,
) -> Result<EEReport> {
    let per_class: Vec<f64> = method
        .class_spectra(stack)?
        .iter()
        .map(entanglement_entropy)
        .collect();
    let average = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(EEReport {
        method: method.name().to_string(),
        bipartition,
        epoch,
        per_class,
        average,
        bound: (stack.classifier().cols() as f64).ln(),
    })
}

/// Per-class entropies of an eval-mode model via the Gram recursion.
pub fn ee_report(model: &QcnnModel, bipartition: FlattenOrder, epoch: Option<usize>) -> Result<EEReport> {
    ee_report_with(&GramRecursion, &model.export_augmented_tensors(), bipartition, epoch)
}

/// Smallest eigenvalue of the correlation matrix relative to its largest;
/// non-negative exactly when the Gram matrix is PSD.
pub fn psd_margin(g: &GramMatrix) -> Result<f64> {
    let e = sym_eigenvalues(g.correlation())?;
    let max = e.first().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
    Ok(e.last().copied().unwrap_or(0.0) / max)
}
