//! Local pixel bases for the representation layer.
//!
//! A basis maps a pixel value to the non-constant channels of an orthonormal
//! function family on `[0, 1]`. The constant function `f_0 = 1` is never
//! emitted as a channel; it enters the tensor description as augmented
//! index 0. Bases are registered by name and looked up at runtime.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

pub trait LocalBasis: Send + Sync {
    /// Registry key, e.g. `"fourier"`.
    fn name(&self) -> &'static str;

    /// Number of non-constant channels emitted for frequency/degree cutoff `n`.
    fn channels(&self, cutoff: usize) -> usize;

    /// Cutoff that yields exactly `channels` channels, if one exists.
    fn cutoff_for_channels(&self, channels: usize) -> Option<usize>;

    /// Writes `f_1(x) .. f_k(x)` into `out` (`out.len() == channels(cutoff)`).
    fn eval(&self, x: f64, cutoff: usize, out: &mut [f64]);

    /// Evaluates `f_i(x)` for augmented index `i` (0 is the constant).
    fn eval_augmented(&self, x: f64, cutoff: usize, out: &mut [f64]) {
        out[0] = 1.0;
        self.eval(x, cutoff, &mut out[1..]);
    }
}

/// `f_{2k-1}(x) = √2 cos(2πkx)`, `f_{2k}(x) = √2 sin(2πkx)`, `k = 1..n`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Fourier;

impl LocalBasis for Fourier {
    fn name(&self) -> &'static str {
        "fourier"
    }

    fn channels(&self, cutoff: usize) -> usize {
        2 * cutoff
    }

    fn cutoff_for_channels(&self, channels: usize) -> Option<usize> {
        channels.is_multiple_of(2).then_some(channels / 2)
    }

    fn eval(&self, x: f64, cutoff: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), 2 * cutoff);
        for k in 1..=cutoff {
            let (s, c) = (2.0 * PI * k as f64 * x).sin_cos();
            out[2 * k - 2] = SQRT_2 * c;
            out[2 * k - 1] = SQRT_2 * s;
        }
    }
}

/// `√(2k+1) P_k(2x − 1)` for `k = 1..n`: Legendre polynomials orthonormal on `[0, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Legendre;

impl LocalBasis for Legendre {
    fn name(&self) -> &'static str {
        "legendre"
    }

    fn channels(&self, cutoff: usize) -> usize {
        cutoff
    }

    fn cutoff_for_channels(&self, channels: usize) -> Option<usize> {
        Some(channels)
    }

    fn eval(&self, x: f64, cutoff: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), cutoff);
        let t = 2.0 * x - 1.0;
        let (mut prev, mut cur) = (1.0, t);
        for k in 1..=cutoff {
            out[k - 1] = ((2 * k + 1) as f64).sqrt() * cur;
            // Bonnet recursion: (k+1) P_{k+1} = (2k+1) t P_k − k P_{k−1}
            let next = ((2 * k + 1) as f64 * t * cur - k as f64 * prev) / (k + 1) as f64;
            prev = cur;
            cur = next;
        }
    }
}

pub const BASIS_NAMES: &[&str] = &["fourier", "legendre"];

pub fn basis_by_name(name: &str) -> Result<Box<dyn LocalBasis>> {
    match name {
        "fourier" => Ok(Box::new(Fourier)),
        "legendre" => Ok(Box::new(Legendre)),
        other => Err(Error::Input(format!(
            "unknown basis `{other}` (available: {})",
            BASIS_NAMES.join(", ")
        ))),
    }
}

/// Dirichlet kernel `D_n(z) = 1 + 2 Σ_{k=1..n} cos(2πkz)`.
pub fn dirichlet_kernel(n: usize, z: f64) -> f64 {
    1.0 + 2.0 * (1..=n).map(|k| (2.0 * PI * k as f64 * z).cos()).sum::<f64>()
}
