//! x₀-prediction denoisers `h(x, σ, y)` and the weight schemes used with them.

mod checkpoint;
mod gaussian;
mod mlp;
mod weights;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{NdcError, Result};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gaussian::{analytic_denoise, AnalyticDenoiser, GaussianMixtureSpec};
pub(crate) use gaussian::argmax;
pub use mlp::{train_denoiser, Activation, LabeledSample, MlpDenoiser, TrainConfig, TrainingLog};
pub use weights::{weight_at, WeightScheme};

/// A class-conditional x₀ predictor.
///
/// Implementations must be pure: the same `(x, σ, y)` always yields the same output.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Class prior used to marginalize class-conditional predictions. Uniform by default.
    fn class_priors(&self) -> Vec<f64> {
        let k = self.num_classes();
        vec![1.0 / k as f64; k]
    }

    /// Writes `h(x, σ, y)` into `out`.
    fn denoise_into(&self, x: &[f64], sigma: f64, class: usize, out: &mut [f64]) -> Result<()>;

    fn denoise(&self, x: &[f64], sigma: f64, class: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.denoise_into(x, sigma, class, &mut out)?;
        Ok(out)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn class_priors(&self) -> Vec<f64> {
        (**self).class_priors()
    }
    fn denoise_into(&self, x: &[f64], sigma: f64, class: usize, out: &mut [f64]) -> Result<()> {
        (**self).denoise_into(x, sigma, class, out)
    }
}

pub(crate) fn check_call(d: &(impl Denoiser + ?Sized), x: &[f64], class: usize, out: &[f64]) -> Result<()> {
    if x.len() != d.dim() {
        return Err(NdcError::DimensionMismatch { expected: d.dim(), got: x.len() });
    }
    if out.len() != d.dim() {
        return Err(NdcError::DimensionMismatch { expected: d.dim(), got: out.len() });
    }
    if class >= d.num_classes() {
        return Err(NdcError::arg(format!("class {class} out of range (K = {})", d.num_classes())));
    }
    Ok(())
}

/// `x₀ + σ·ε`.
pub fn sample_forward(x0: &[f64], sigma: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(NdcError::DimensionMismatch { expected: x0.len(), got: noise.len() });
    }
    if !(sigma >= 0.0) {
        return Err(NdcError::arg(format!("sigma must be nonnegative, got {sigma}")));
    }
    Ok(x0.iter().zip(noise).map(|(x, e)| x + sigma * e).collect())
}

/// Coordinatewise output bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ClipBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(NdcError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(NdcError::arg("clip box needs lower < upper in every coordinate"));
        }
        Ok(Self { lower, upper })
    }

    /// `[lo, hi]^dim`.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    /// The unit cube `[0, 1]^dim`.
    pub fn unit(dim: usize) -> Self {
        Self { lower: vec![0.0; dim], upper: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp_in_place(&self, v: &mut [f64]) {
        for ((x, lo), hi) in v.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

pub fn clip_output(h_out: &[f64], clip: &ClipBox) -> Vec<f64> {
    let mut v = h_out.to_vec();
    clip.clamp_in_place(&mut v);
    v
}

/// Wraps a denoiser so every output is clamped into a [`ClipBox`].
#[derive(Debug, Clone)]
pub struct Clipped<D> {
    pub inner: D,
    pub clip: ClipBox,
}

impl<D: Denoiser> Clipped<D> {
    pub fn new(inner: D, clip: ClipBox) -> Result<Self> {
        if clip.dim() != inner.dim() {
            return Err(NdcError::DimensionMismatch { expected: inner.dim(), got: clip.dim() });
        }
        Ok(Self { inner, clip })
    }
}

impl<D: Denoiser> Denoiser for Clipped<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn class_priors(&self) -> Vec<f64> {
        self.inner.class_priors()
    }
    fn denoise_into(&self, x: &[f64], sigma: f64, class: usize, out: &mut [f64]) -> Result<()> {
        self.inner.denoise_into(x, sigma, class, out)?;
        self.clip.clamp_in_place(out);
        Ok(())
    }
}

/// Counts denoiser evaluations (network function evaluations).
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicU64,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn class_priors(&self) -> Vec<f64> {
        self.inner.class_priors()
    }
    fn denoise_into(&self, x: &[f64], sigma: f64, class: usize, out: &mut [f64]) -> Result<()> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.denoise_into(x, sigma, class, out)
    }
}
