//! The q-CNN: a representation layer followed by `L` rounds of batch
//! normalization, 1×1 convolution and same-channel product pooling over
//! width-2 windows, then a final batch normalization and a linear
//! classifier.
//!
//! Activations of a batch are stored as a [`Matrix`] with one row per
//! (sample, site) pair, sample-major. Adjacent rows `2r, 2r+1` are therefore
//! the two inputs of pooling window `r` at every level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_by_name, LocalBasis};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_transa, matmul_transb, Matrix};
use crate::tape::{GradientTape, Gradients, ParamId, TapeOp};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
/// Initial BN scale and shift. A shift that dominates the scale starts every
/// product near the constant channel: the net is close to a product state and
/// the pooled features stay light-tailed enough to train at depth 8.
pub const DEFAULT_BN_INIT_SCALE: f64 = 0.5;
pub const DEFAULT_BN_INIT_SHIFT: f64 = 1.0;

fn default_bn_init_scale() -> f64 {
    DEFAULT_BN_INIT_SCALE
}

fn default_bn_init_shift() -> f64 {
    DEFAULT_BN_INIT_SHIFT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pixel count `N`, a power of two.
    pub n_pixels: usize,
    /// Channel widths `d_0 ..= d_L`.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub basis: String,
    /// Frequency (fourier) or degree (legendre) cutoff `n`.
    pub cutoff: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    #[serde(default = "default_bn_init_scale")]
    pub bn_init_scale: f64,
    #[serde(default = "default_bn_init_shift")]
    pub bn_init_shift: f64,
}

impl ModelConfig {
    /// Default schedule `d_ℓ = d(ℓ+1)`, `ℓ = 0..=L`, with the cutoff chosen so
    /// the basis emits exactly `d_0 = d` channels.
    pub fn with_schedule(n_pixels: usize, d: usize, basis: &str, num_classes: usize) -> Result<Self> {
        let depth = depth_of(n_pixels)?;
        let b = basis_by_name(basis)?;
        let cutoff = b.cutoff_for_channels(d).ok_or_else(|| {
            Error::config("model.d", format!("the {basis} basis cannot emit {d} channels"))
        })?;
        let cfg = Self {
            n_pixels,
            channels: (0..=depth).map(|l| d * (l + 1)).collect(),
            num_classes,
            basis: basis.to_string(),
            cutoff,
            bn_epsilon: DEFAULT_BN_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_init_scale: DEFAULT_BN_INIT_SCALE,
            bn_init_shift: DEFAULT_BN_INIT_SHIFT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `L = log₂ N`.
    pub fn depth(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn basis(&self) -> Result<Box<dyn LocalBasis>> {
        basis_by_name(&self.basis)
    }

    /// Width of layer `ℓ`'s output, with `d_{L+1} = |C|`.
    pub fn out_channels(&self, layer: usize) -> usize {
        if layer + 1 < self.channels.len() {
            self.channels[layer + 1]
        } else {
            self.num_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = depth_of(self.n_pixels).map_err(|_| {
            Error::config("model.n_pixels", format!("{} is not a power of two ≥ 2", self.n_pixels))
        })?;
        if self.channels.len() != depth + 1 {
            return Err(Error::config(
                "model.channels",
                format!("expected {} widths for N = {}, got {}", depth + 1, self.n_pixels, self.channels.len()),
            ));
        }
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::config(format!("model.channels[{i}]"), "width must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be at least 1"));
        }
        let basis = basis_by_name(&self.basis).map_err(|e| Error::config("model.basis", e.to_string()))?;
        if self.cutoff == 0 {
            return Err(Error::config("model.cutoff", "must be at least 1"));
        }
        if basis.channels(self.cutoff) != self.channels[0] {
            return Err(Error::config(
                "model.channels[0]",
                format!(
                    "{} basis with cutoff {} emits {} channels, but d_0 = {}",
                    self.basis,
                    self.cutoff,
                    basis.channels(self.cutoff),
                    self.channels[0]
                ),
            ));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::config("model.bn_epsilon", "must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("model.bn_momentum", "must lie in (0, 1]"));
        }
        if !self.bn_init_scale.is_finite() {
            return Err(Error::config("model.bn_init_scale", "must be finite"));
        }
        if !self.bn_init_shift.is_finite() {
            return Err(Error::config("model.bn_init_shift", "must be finite"));
        }
        Ok(())
    }
}

fn depth_of(n_pixels: usize) -> Result<usize> {
    if n_pixels < 2 || !n_pixels.is_power_of_two() {
        return Err(Error::Input(format!("N = {n_pixels} is not a power of two ≥ 2")));
    }
    Ok(n_pixels.trailing_zeros() as usize)
}

/// `P = Σ_{ℓ=0..L} (d_ℓ d_{ℓ+1} + 2 d_ℓ)` with `d_{L+1} = |C|`.
pub fn param_count(config: &ModelConfig) -> usize {
    (0..config.channels.len())
        .map(|l| config.channels[l] * config.out_channels(l) + 2 * config.channels[l])
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations of a batch at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    batch: usize,
    sites: usize,
    values: Matrix,
}

impl FeatureMap {
    pub fn new(batch: usize, sites: usize, values: Matrix) -> Result<Self> {
        if values.rows() != batch * sites {
            return Err(Error::Shape(format!(
                "{} rows for batch {batch} x {sites} sites",
                values.rows()
            )));
        }
        Ok(Self { batch, sites, values })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Channel vector of `sample` at `site`.
    pub fn site(&self, sample: usize, site: usize) -> &[f64] {
        self.values.row(sample * self.sites + site)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    /// Learnable scale σ^(ℓ), shape `1 × d_ℓ`.
    pub scale: Matrix,
    /// Learnable mean μ^(ℓ), shape `1 × d_ℓ`.
    pub shift: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Self {
        Self {
            scale: Matrix::from_vec(1, channels, vec![1.0; channels]).expect("sized"),
            shift: Matrix::zeros(1, channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Eval-mode affine map `ζ' = w ζ + z`, returned as `(w, z)`.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.channels())
            .map(|c| {
                let w = self.scale[(0, c)] / (self.running_var[c] + self.epsilon).sqrt();
                (w, self.shift[(0, c)] - self.running_mean[c] * w)
            })
            .unzip()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `a^(ℓ)`, shape `d_{ℓ+1} × d_ℓ`.
    pub weight: Matrix,
}

/// Maps each pixel to its basis channels: `ζ^(0)_{p,i} = f_i(x_p)`.
///
/// `pixels` holds one sample per row.
pub fn represent(pixels: &Matrix, basis: &dyn LocalBasis, cutoff: usize) -> Result<FeatureMap> {
    let (batch, n) = pixels.shape();
    let d0 = basis.channels(cutoff);
    let mut out = Matrix::zeros(batch * n, d0);
    for b in 0..batch {
        for (p, &x) in pixels.row(b).iter().enumerate() {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Input(format!(
                    "pixel {p} of sample {b} is {x}, outside [0, 1]"
                )));
            }
            basis.eval(x, cutoff, out.row_mut(b * n + p));
        }
    }
    FeatureMap::new(batch, n, out)
}

struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

fn batchnorm_impl(
    input: &FeatureMap,
    layer: &mut BatchNormLayer,
    mode: Mode,
) -> Result<(FeatureMap, BnCache)> {
    let channels = layer.channels();
    if input.channels() != channels {
        return Err(Error::Shape(format!(
            "batch norm over {channels} channels got {}",
            input.channels()
        )));
    }
    let x = input.values();
    let rows = x.rows();
    let (mean, var) = match mode {
        Mode::Train => {
            if rows == 0 {
                return Err(Error::Input("empty batch".into()));
            }
            let mut mean = vec![0.0; channels];
            for r in 0..rows {
                for (m, v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; channels];
            for r in 0..rows {
                for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let unbias = if rows > 1 {
                rows as f64 / (rows - 1) as f64
            } else {
                1.0
            };
            for c in 0..channels {
                layer.running_mean[c] =
                    (1.0 - layer.momentum) * layer.running_mean[c] + layer.momentum * mean[c];
                layer.running_var[c] =
                    (1.0 - layer.momentum) * layer.running_var[c] + layer.momentum * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (layer.running_mean.clone(), layer.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + layer.epsilon).sqrt()).collect();
    let mut normalized = Matrix::zeros(rows, channels);
    let mut out = Matrix::zeros(rows, channels);
    for r in 0..rows {
        let xr = x.row(r);
        for c in 0..channels {
            let h = (xr[c] - mean[c]) * inv_std[c];
            normalized[(r, c)] = h;
            out[(r, c)] = layer.scale[(0, c)] * h + layer.shift[(0, c)];
        }
    }
    Ok((
        FeatureMap::new(input.batch(), input.sites(), out)?,
        BnCache { normalized, inv_std },
    ))
}

/// Per-channel affine standardization. Train mode uses statistics over the
/// batch and spatial dimensions and updates the running statistics; eval
/// mode uses the running statistics.
pub fn batchnorm_forward(
    input: &FeatureMap,
    layer: &mut BatchNormLayer,
    mode: Mode,
) -> Result<FeatureMap> {
    batchnorm_impl(input, layer, mode).map(|(out, _)| out)
}

/// `ξ_p = a ζ'_p` at every site with the same matrix.
pub fn conv1x1(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    let values = matmul_transb(input.values(), &layer.weight)?;
    FeatureMap::new(input.batch(), input.sites(), values)
}

/// `ζ^(ℓ+1)_{p,i} = ξ_{2p,i} ξ_{2p+1,i}` (0-indexed sites).
pub fn product_pool(input: &FeatureMap) -> Result<FeatureMap> {
    if !input.sites().is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "product pooling needs an even spatial length, got {}",
            input.sites()
        )));
    }
    let x = input.values();
    let mut out = Matrix::zeros(x.rows() / 2, x.cols());
    for r in 0..out.rows() {
        let (left, right) = (x.row(2 * r), x.row(2 * r + 1));
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(left).zip(right) {
            *o = a * b;
        }
    }
    FeatureMap::new(input.batch(), input.sites() / 2, out)
}

/// Index of the largest `|α_y|`, lowest index on ties.
pub fn classify(scores: &[f64]) -> usize {
    let mut best = 0;
    for (y, s) in scores.iter().enumerate() {
        if s.abs() > scores[best].abs() {
            best = y;
        }
    }
    best
}

/// Square-distance loss `(1/|B|) Σ_b Σ_y (α_y − δ_{y,l})²`.
pub fn loss(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(scores, labels)?;
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        for (y, &a) in scores.row(b).iter().enumerate() {
            let t = if y == label { 1.0 } else { 0.0 };
            total += (a - t) * (a - t);
        }
    }
    Ok(total / labels.len() as f64)
}

fn check_labels(scores: &Matrix, labels: &[usize]) -> Result<()> {
    if scores.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            scores.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.cols()) {
        return Err(Error::Input(format!(
            "label {bad} outside 0..{}",
            scores.cols()
        )));
    }
    Ok(())
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcnnModel {
    pub config: ModelConfig,
    /// `L + 1` normalizations; the last one precedes the classifier.
    pub norms: Vec<BatchNormLayer>,
    /// `L + 1` linear maps; the last one is the classifier `a^(L)`.
    pub convs: Vec<ConvLayer>,
}

impl QcnnModel {
    /// Convolution entries uniform in `[−√(1/d_ℓ), √(1/d_ℓ)]`; BN scale and
    /// shift from the config, running statistics (0, 1).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut norms = Vec::new();
        let mut convs = Vec::new();
        for (l, &d) in config.channels.iter().enumerate() {
            let mut bn = BatchNormLayer::new(d, config.bn_epsilon, config.bn_momentum);
            bn.scale.as_mut_slice().fill(config.bn_init_scale);
            bn.shift.as_mut_slice().fill(config.bn_init_shift);
            norms.push(bn);
            let bound = (1.0 / d as f64).sqrt();
            let out = config.out_channels(l);
            let data = (0..out * d).map(|_| rng.gen_range(-bound..=bound)).collect();
            convs.push(ConvLayer {
                weight: Matrix::from_vec(out, d, data)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            norms,
            convs,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    /// Parameter shapes in canonical order: for each level `ℓ`, the
    /// convolution, then BN scale, then BN shift.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|m| m.shape()).collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.convs
            .iter()
            .zip(&self.norms)
            .flat_map(|(c, n)| [&c.weight, &n.scale, &n.shift])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.convs
            .iter_mut()
            .zip(self.norms.iter_mut())
            .flat_map(|(c, n)| [&mut c.weight, &mut n.scale, &mut n.shift])
            .collect()
    }

    pub fn conv_param(layer: usize) -> ParamId {
        ParamId(3 * layer)
    }

    pub fn bn_scale_param(layer: usize) -> ParamId {
        ParamId(3 * layer + 1)
    }

    pub fn bn_shift_param(layer: usize) -> ParamId {
        ParamId(3 * layer + 2)
    }

    /// Number of trainable scalars, by enumeration.
    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }

    fn check_input(&self, pixels: &Matrix) -> Result<()> {
        if pixels.cols() != self.config.n_pixels {
            return Err(Error::Shape(format!(
                "model expects {} pixels per sample, got {}",
                self.config.n_pixels,
                pixels.cols()
            )));
        }
        Ok(())
    }

    /// Scores `α` (batch × |C|). Train mode updates running statistics.
    pub fn forward(&mut self, pixels: &Matrix, mode: Mode) -> Result<Matrix> {
        self.forward_impl(pixels, mode, None)
    }

    /// Eval-mode scores; a pure function of the parameters and input.
    pub fn predict(&self, pixels: &Matrix) -> Result<Matrix> {
        // Eval mode never writes to the layers, but the shared code path takes
        // `&mut`; a clone of the small norm layers keeps this `&self`.
        let mut norms = self.norms.clone();
        self.check_input(pixels)?;
        let basis = self.config.basis()?;
        let mut x = represent(pixels, basis.as_ref(), self.config.cutoff)?;
        let depth = self.depth();
        for l in 0..=depth {
            let y = batchnorm_forward(&x, &mut norms[l], Mode::Eval)?;
            let z = conv1x1(&y, &self.convs[l])?;
            x = if l < depth { product_pool(&z)? } else { z };
        }
        Ok(x.into_values())
    }

    /// Forward pass recorded on a tape ending in the square-distance loss.
    /// Returns the tape, the loss value and the scores.
    pub fn forward_recorded(
        &mut self,
        pixels: &Matrix,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(GradientTape, f64, Matrix)> {
        let mut tape = GradientTape::new(self.param_shapes());
        let scores = self.forward_impl(pixels, mode, Some(&mut tape))?;
        check_labels(&scores, labels)?;
        let mut residual = scores.clone();
        for (b, &label) in labels.iter().enumerate() {
            residual[(b, label)] -= 1.0;
        }
        let value = loss(&scores, labels)?;
        tape.record(Box::new(SquareLossOp { residual }));
        tape.finish(Matrix::from_vec(1, 1, vec![value])?);
        Ok((tape, value, scores))
    }

    fn forward_impl(
        &mut self,
        pixels: &Matrix,
        mode: Mode,
        mut tape: Option<&mut GradientTape>,
    ) -> Result<Matrix> {
        self.check_input(pixels)?;
        let basis = self.config.basis()?;
        let mut x = represent(pixels, basis.as_ref(), self.config.cutoff)?;
        let depth = self.depth();
        for l in 0..=depth {
            let (y, cache) = batchnorm_impl(&x, &mut self.norms[l], mode)?;
            let z = conv1x1(&y, &self.convs[l])?;
            if let Some(t) = tape.as_deref_mut() {
                t.record(Box::new(BatchNormOp {
                    layer: l,
                    scale: self.norms[l].scale.clone(),
                    cache,
                    mode,
                }));
                t.record(Box::new(ConvOp {
                    layer: l,
                    weight: self.convs[l].weight.clone(),
                    input: y.values().clone(),
                }));
            }
            x = if l < depth {
                let pooled = product_pool(&z)?;
                if let Some(t) = tape.as_deref_mut() {
                    t.record(Box::new(PoolOp {
                        input: z.into_values(),
                    }));
                }
                pooled
            } else {
                z
            };
        }
        Ok(x.into_values())
    }

    /// Frobenius norms of every parameter, for diagnostics.
    pub fn param_norms(&self) -> Vec<f64> {
        self.params().iter().map(|m| m.frobenius_norm()).collect()
    }

    pub fn export_augmented_tensors(&self) -> AugmentedTensorStack {
        let depth = self.depth();
        let layers = (0..=depth)
            .map(|l| {
                let (w, z) = self.norms[l].eval_affine();
                let a = &self.convs[l].weight;
                let constant_row = usize::from(l < depth);
                let mut t = Matrix::zeros(a.rows() + constant_row, a.cols() + 1);
                if l < depth {
                    t[(0, 0)] = 1.0;
                }
                for j in 0..a.rows() {
                    let mut az = 0.0;
                    for i in 0..a.cols() {
                        az += a[(j, i)] * z[i];
                        t[(j + constant_row, i + 1)] = a[(j, i)] * w[i];
                    }
                    t[(j + constant_row, 0)] = az;
                }
                t
            })
            .collect();
        AugmentedTensorStack {
            layers,
            n_pixels: self.config.n_pixels,
            basis: self.config.basis.clone(),
            cutoff: self.config.cutoff,
        }
    }
}

/// The matrices `ã^(0..=L)` giving the exact multilinear description of an
/// eval-mode model. Augmented index 0 is the constant channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedTensorStack {
    /// `ã^(ℓ)` is `(d_{ℓ+1}+1) × (d_ℓ+1)` for `ℓ < L`; `ã^(L)` is `|C| × (d_L+1)`.
    pub layers: Vec<Matrix>,
    pub n_pixels: usize,
    pub basis: String,
    pub cutoff: usize,
}

impl AugmentedTensorStack {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn classifier(&self) -> &Matrix {
        &self.layers[self.depth()]
    }

    pub fn num_classes(&self) -> usize {
        self.classifier().rows()
    }
}

struct BatchNormOp {
    layer: usize,
    scale: Matrix,
    cache: BnCache,
    mode: Mode,
}

impl TapeOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, dy: &Matrix, grads: &mut Gradients) -> Result<Matrix> {
        let (rows, channels) = dy.shape();
        let xhat = &self.cache.normalized;
        let mut d_scale = Matrix::zeros(1, channels);
        let mut d_shift = Matrix::zeros(1, channels);
        for r in 0..rows {
            let (g, h) = (dy.row(r), xhat.row(r));
            for c in 0..channels {
                d_shift[(0, c)] += g[c];
                d_scale[(0, c)] += g[c] * h[c];
            }
        }
        let mut dx = Matrix::zeros(rows, channels);
        match self.mode {
            Mode::Train => {
                let m = rows as f64;
                for r in 0..rows {
                    let (g, h) = (dy.row(r), xhat.row(r));
                    for c in 0..channels {
                        let k = self.scale[(0, c)] * self.cache.inv_std[c] / m;
                        dx[(r, c)] = k * (m * g[c] - d_shift[(0, c)] - h[c] * d_scale[(0, c)]);
                    }
                }
            }
            Mode::Eval => {
                for r in 0..rows {
                    let g = dy.row(r);
                    for c in 0..channels {
                        dx[(r, c)] = self.scale[(0, c)] * self.cache.inv_std[c] * g[c];
                    }
                }
            }
        }
        grads.accumulate(QcnnModel::bn_scale_param(self.layer), &d_scale)?;
        grads.accumulate(QcnnModel::bn_shift_param(self.layer), &d_shift)?;
        Ok(dx)
    }
}

struct ConvOp {
    layer: usize,
    weight: Matrix,
    input: Matrix,
}

impl TapeOp for ConvOp {
    fn name(&self) -> &'static str {
        "conv1x1"
    }

    fn backward(&self, dz: &Matrix, grads: &mut Gradients) -> Result<Matrix> {
        grads.accumulate(QcnnModel::conv_param(self.layer), &matmul_transa(dz, &self.input)?)?;
        matmul(dz, &self.weight)
    }
}

struct PoolOp {
    input: Matrix,
}

impl TapeOp for PoolOp {
    fn name(&self) -> &'static str {
        "product_pool"
    }

    fn backward(&self, dout: &Matrix, _grads: &mut Gradients) -> Result<Matrix> {
        let mut dx = Matrix::zeros(self.input.rows(), self.input.cols());
        for r in 0..dout.rows() {
            let g = dout.row(r);
            for c in 0..g.len() {
                let left = self.input[(2 * r, c)];
                let right = self.input[(2 * r + 1, c)];
                dx[(2 * r, c)] = g[c] * right;
                dx[(2 * r + 1, c)] = g[c] * left;
            }
        }
        Ok(dx)
    }
}

struct SquareLossOp {
    /// `α − onehot(label)`.
    residual: Matrix,
}

impl TapeOp for SquareLossOp {
    fn name(&self) -> &'static str {
        "square_loss"
    }

    fn backward(&self, dout: &Matrix, _grads: &mut Gradients) -> Result<Matrix> {
        let mut d = self.residual.clone();
        d.scale(2.0 * dout[(0, 0)] / self.residual.rows() as f64);
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Fourier;

    fn fmap(batch: usize, sites: usize, rows: &[&[f64]]) -> FeatureMap {
        FeatureMap::new(batch, sites, Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn param_count_matches_closed_form() {
        for d in [2, 4, 8, 18, 40] {
            let cfg = ModelConfig::with_schedule(256, d, "fourier", 10).unwrap();
            assert_eq!(param_count(&cfg), 240 * d * d + 180 * d);
            let model = QcnnModel::init(&cfg, 0).unwrap();
            assert_eq!(model.num_parameters(), param_count(&cfg));
        }
    }

    #[test]
    fn config_rejects_odd_width_for_fourier() {
        let err = ModelConfig::with_schedule(256, 3, "fourier", 10).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "model.d"));
        assert!(ModelConfig::with_schedule(256, 3, "legendre", 10).is_ok());
        assert!(ModelConfig::with_schedule(100, 2, "fourier", 10).is_err());
    }

    #[test]
    fn represent_checks_range() {
        let px = Matrix::from_rows(&[&[0.0, 1.2]]);
        assert!(matches!(represent(&px, &Fourier, 1), Err(Error::Input(_))));
        let px = Matrix::from_rows(&[&[0.0, 0.25]]);
        let f = represent(&px, &Fourier, 1).unwrap();
        assert_eq!(f.site(0, 0), &[std::f64::consts::SQRT_2, 0.0]);
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let x = fmap(2, 2, &[&[1.0, 5.0], &[2.0, -1.0], &[3.0, 0.0], &[6.0, 2.0]]);
        let mut bn = BatchNormLayer::new(2, 1e-12, 0.1);
        let y = batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| y.values()[(r, c)]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        // running mean moved 10% toward the batch mean (3.0 for channel 0)
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_constant_batch_maps_to_shift() {
        let x = fmap(3, 1, &[&[2.5], &[2.5], &[2.5]]);
        let mut bn = BatchNormLayer::new(1, 1e-5, 0.1);
        bn.shift[(0, 0)] = 0.7;
        let y = batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
        assert!(y.values().as_slice().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn batchnorm_eval_identity_with_init_stats() {
        let x = fmap(1, 2, &[&[0.3, -2.0], &[1.5, 4.0]]);
        let mut bn = BatchNormLayer::new(2, f64::MIN_POSITIVE, 0.1);
        let y = batchnorm_forward(&x, &mut bn, Mode::Eval).unwrap();
        assert_eq!(y, x);
        assert_eq!(bn.running_var, vec![1.0, 1.0]);
    }

    #[test]
    fn conv_examples() {
        let x = fmap(1, 2, &[&[1.0, -2.0], &[0.5, 3.0]]);
        let id = ConvLayer {
            weight: Matrix::identity(2),
        };
        assert_eq!(conv1x1(&x, &id).unwrap(), x);
        let sum = ConvLayer {
            weight: Matrix::from_rows(&[&[1.0, 1.0]]),
        };
        let y = conv1x1(&fmap(1, 1, &[&[2.0, 3.0]]), &sum).unwrap();
        assert_eq!(y.values().as_slice(), &[5.0]);
        assert!(conv1x1(&fmap(1, 1, &[&[2.0, 3.0, 1.0]]), &sum).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = fmap(1, 4, &[&[1.0], &[2.0], &[3.0], &[4.0]]);
        assert_eq!(product_pool(&x).unwrap().values().as_slice(), &[2.0, 12.0]);
        let x = fmap(1, 2, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = product_pool(&x).unwrap();
        assert_eq!(y.values().as_slice(), &[3.0, 8.0]);
        assert_eq!(y.sites(), 1);
        let ones = fmap(2, 2, &[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert!(product_pool(&ones).unwrap().values().as_slice().iter().all(|&v| v == 1.0));
        let zero = fmap(1, 2, &[&[0.0, 5.0], &[7.0, 2.0]]);
        assert_eq!(product_pool(&zero).unwrap().values().as_slice(), &[0.0, 10.0]);
        assert!(product_pool(&fmap(1, 3, &[&[1.0], &[2.0], &[3.0]])).is_err());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&[0.9, -0.95, 0.1]), 1);
        assert_eq!(classify(&[0.0, 0.0, 1.0, 0.0]), 2);
        assert_eq!(classify(&[0.5, -0.5]), 0);
    }

    #[test]
    fn loss_examples() {
        let onehot = Matrix::from_rows(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(loss(&onehot, &[1]).unwrap(), 0.0);
        let zeros = Matrix::zeros(2, 3);
        assert_eq!(loss(&zeros, &[0, 2]).unwrap(), 1.0);
        let ones = Matrix::from_rows(&[&[1.0, 1.0]]);
        assert_eq!(loss(&ones, &[0]).unwrap(), 1.0);
        assert!(loss(&ones, &[2]).is_err());
    }

    #[test]
    fn init_is_deterministic_with_configured_norms() {
        let cfg = ModelConfig::with_schedule(16, 4, "fourier", 10).unwrap();
        let a = QcnnModel::init(&cfg, 7).unwrap();
        let b = QcnnModel::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, QcnnModel::init(&cfg, 8).unwrap());
        for (l, n) in a.norms.iter().enumerate() {
            assert!(n.scale.as_slice().iter().all(|&v| v == DEFAULT_BN_INIT_SCALE));
            assert!(n.shift.as_slice().iter().all(|&v| v == DEFAULT_BN_INIT_SHIFT));
            assert_eq!((n.running_mean[0], n.running_var[0]), (0.0, 1.0));
            let bound = (1.0 / cfg.channels[l] as f64).sqrt();
            assert!(a.convs[l].weight.max_abs() <= bound);
        }
    }

    #[test]
    fn forward_shape_and_pool_count() {
        let cfg = ModelConfig::with_schedule(16, 2, "fourier", 10).unwrap();
        let mut model = QcnnModel::init(&cfg, 1).unwrap();
        let px = Matrix::from_vec(3, 16, (0..48).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let out = model.forward(&px, Mode::Train).unwrap();
        assert_eq!(out.shape(), (3, 10));
        let (tape, _, _) = model.forward_recorded(&px, &[0, 1, 2], Mode::Train).unwrap();
        let pools = tape.op_names().iter().filter(|n| **n == "product_pool").count();
        assert_eq!(pools, cfg.depth());
    }

    #[test]
    fn export_of_identity_layer_is_identity() {
        let cfg = ModelConfig {
            n_pixels: 2,
            channels: vec![2, 2],
            num_classes: 3,
            basis: "fourier".into(),
            cutoff: 1,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            bn_init_scale: 1.0,
            bn_init_shift: 0.0,
        };
        let mut model = QcnnModel::init(&cfg, 0).unwrap();
        model.convs[0].weight = Matrix::identity(2);
        model.norms[0].running_var = vec![1.0 - 1e-5; 2];
        let stack = model.export_augmented_tensors();
        assert!(stack.layers[0].sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-15);
        assert_eq!(stack.layers[0].row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(stack.classifier().shape(), (3, 3));
    }
}
