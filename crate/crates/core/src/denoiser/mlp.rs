use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::weights::{weight_at, WeightScheme};
use super::{check_call, Denoiser};
use crate::error::{NdcError, Result};
use crate::exec;
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Silu,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Silu => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Silu),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Dense layer, weights row-major `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub(crate) inputs: usize,
    pub(crate) outputs: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl Layer {
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Multilayer perceptron x₀-predictor for low-dimensional data.
///
/// The network sees `[c_in·x, one_hot(y), ln(σ)/4]` and is wrapped in the usual
/// skip/output preconditioning `h = c_skip·x + c_out·F(…)` with
/// `c_skip = σ_d²/(σ² + σ_d²)`, `c_out = σ·σ_d/√(σ² + σ_d²)`, `c_in = 1/√(σ² + σ_d²)`.
/// At σ = 0 the output is exactly `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    pub(crate) dim: usize,
    pub(crate) num_classes: usize,
    pub(crate) sigma_data: f64,
    pub(crate) activation: Activation,
    pub(crate) layers: Vec<Layer>,
}

struct Precond {
    skip: f64,
    out: f64,
    input: f64,
    noise: f64,
}

fn precond(sigma: f64, sigma_data: f64) -> Precond {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let r = (s2 + d2).sqrt();
    Precond { skip: d2 / (s2 + d2), out: sigma * sigma_data / r, input: 1.0 / r, noise: sigma.ln() / 4.0 }
}

impl MlpDenoiser {
    /// Randomly initialised network with the given hidden widths.
    pub fn new(
        dim: usize,
        num_classes: usize,
        hidden: &[usize],
        activation: Activation,
        sigma_data: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(NdcError::arg("dim and num_classes must be positive"));
        }
        if !(sigma_data > 0.0) {
            return Err(NdcError::arg("sigma_data must be positive"));
        }
        if hidden.contains(&0) {
            return Err(NdcError::arg("hidden widths must be positive"));
        }
        let mut widths = vec![dim + num_classes + 1];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut r = rng::substream(seed, &[0x4D4C50]);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let last = i + 2 == widths.len();
                // output layer starts small so F ≈ 0 and h ≈ c_skip·x
                let scale = if last { 0.1 } else { 1.0 } / (fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z * scale
                    })
                    .collect();
                Layer { inputs: fan_in, outputs: fan_out, weights, bias: vec![0.0; fan_out] }
            })
            .collect();
        Ok(Self { dim, num_classes, sigma_data, activation, layers })
    }

    pub(crate) fn from_parts(
        dim: usize,
        num_classes: usize,
        sigma_data: f64,
        activation: Activation,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(NdcError::MalformedCheckpoint("no layers".into()));
        }
        if layers[0].inputs != dim + num_classes + 1 {
            return Err(NdcError::MalformedCheckpoint(format!(
                "first layer takes {} inputs, expected {}",
                layers[0].inputs,
                dim + num_classes + 1
            )));
        }
        if layers.last().map(|l| l.outputs) != Some(dim) {
            return Err(NdcError::MalformedCheckpoint("last layer width differs from dim".into()));
        }
        if layers.windows(2).any(|w| w[0].outputs != w[1].inputs) {
            return Err(NdcError::MalformedCheckpoint("layer shapes do not chain".into()));
        }
        if !(sigma_data > 0.0) {
            return Err(NdcError::MalformedCheckpoint("sigma_data must be positive".into()));
        }
        Ok(Self { dim, num_classes, sigma_data, activation, layers })
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Widths of every layer boundary, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn features(&self, x: &[f64], p: &Precond, class: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.dim + self.num_classes + 1);
        f.extend(x.iter().map(|v| v * p.input));
        f.extend((0..self.num_classes).map(|k| if k == class { 1.0 } else { 0.0 }));
        f.push(p.noise);
        f
    }

    /// Forward pass keeping pre-activations and activations for backprop.
    fn forward_cached(&self, input: Vec<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        acts.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.outputs];
            layer.forward(&acts[i], &mut z);
            let a = if i + 1 < n { z.iter().map(|&v| self.activation.apply(v)).collect() } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    fn network(&self, input: &[f64]) -> Vec<f64> {
        let n = self.layers.len();
        let mut cur = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.outputs];
            layer.forward(&cur, &mut z);
            if i + 1 < n {
                for v in z.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            cur = z;
        }
        cur
    }

    /// Loss `weight·‖h − x₀‖²/D` for one example, accumulating its gradient into `grad`.
    fn accumulate_gradient(
        &self,
        x: &[f64],
        sigma: f64,
        class: usize,
        target: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        if sigma == 0.0 {
            // h = x exactly, no dependence on parameters
            return weight * x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.dim as f64;
        }
        let p = precond(sigma, self.sigma_data);
        let (pre, acts) = self.forward_cached(self.features(x, &p, class));
        let out = acts.last().expect("network has layers");
        let d = self.dim as f64;
        let mut loss = 0.0;
        // dL/dF_j = 2·w·(h_j − x0_j)·c_out / D
        let mut delta: Vec<f64> = (0..self.dim)
            .map(|j| {
                let h = p.skip * x[j] + p.out * out[j];
                let r = h - target[j];
                loss += r * r;
                2.0 * weight * r * p.out / d
            })
            .collect();

        // parameter offsets of each layer in the flat gradient
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.bias.len();
        }
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &acts[li];
            let base = offsets[li];
            let (gw, gb) = grad[base..base + layer.weights.len() + layer.bias.len()].split_at_mut(layer.weights.len());
            for (o, dz) in delta.iter().enumerate() {
                gb[o] += dz;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += dz * a;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, dz) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (pv, w) in prev.iter_mut().zip(row) {
                        *pv += dz * w;
                    }
                }
                for (pv, z) in prev.iter_mut().zip(&pre[li - 1]) {
                    *pv *= self.activation.derivative(*z);
                }
                delta = prev;
            }
        }
        weight * loss / d
    }

    fn apply_update(&mut self, delta: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w -= delta[off];
                off += 1;
            }
        }
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn denoise_into(&self, x: &[f64], sigma: f64, class: usize, out: &mut [f64]) -> Result<()> {
        check_call(self, x, class, out)?;
        if !(sigma >= 0.0) {
            return Err(NdcError::arg(format!("sigma must be nonnegative, got {sigma}")));
        }
        if sigma == 0.0 {
            out.copy_from_slice(x);
            return Ok(());
        }
        let p = precond(sigma, self.sigma_data);
        let f = self.network(&self.features(x, &p, class));
        for ((o, xi), fi) in out.iter_mut().zip(x).zip(&f) {
            *o = p.skip * xi + p.out * fi;
        }
        Ok(())
    }
}

/// A data point `x₀` with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Minibatch Adam with global-norm gradient clipping and cosine learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`; 1 disables the decay.
    pub final_lr_fraction: f64,
    pub max_grad_norm: f64,
    /// Draw timesteps in proportion to `w_t` (each example then carries the mean weight);
    /// otherwise draw them uniformly and weight each example by its own `w_t`.
    pub importance_sampling: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 2e-3,
            final_lr_fraction: 0.01,
            max_grad_norm: 1.0,
            importance_sampling: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Cosine interpolation from `learning_rate` to `final_lr_fraction·learning_rate`.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        let progress = if total_steps > 1 { step as f64 / (total_steps - 1) as f64 } else { 1.0 };
        let floor = self.final_lr_fraction;
        self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Mean weighted MSE per epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainingLog {
    /// Trailing moving average of the epoch losses (`window` epochs, shorter at the start).
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.epoch_loss.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let s = &self.epoch_loss[lo..=i];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect()
    }
}

/// Examples per gradient work item. Fixed so the reduction order never depends on threads.
const GRAD_CHUNK: usize = 16;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(g, (m, v))| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Trains `model` to minimise `mean_t w_t·E‖h(x₀ + σ_t ε, σ_t, y) − x₀‖²/D`.
///
/// Timesteps are drawn in proportion to `w_t` and every example carries the mean
/// weight, an unbiased and lower-variance estimate of the same objective.
pub fn train_denoiser(
    mut model: MlpDenoiser,
    data: &[LabeledSample],
    schedule: &NoiseSchedule,
    scheme: &WeightScheme,
    cfg: &TrainConfig,
) -> Result<(MlpDenoiser, TrainingLog)> {
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    if data.is_empty() {
        return Err(NdcError::arg("training data is empty"));
    }
    if let Some(bad) = data.iter().find(|s| s.x.len() != model.dim) {
        return Err(NdcError::DimensionMismatch { expected: model.dim, got: bad.x.len() });
    }
    if let Some(bad) = data.iter().find(|s| s.label >= model.num_classes) {
        return Err(NdcError::arg(format!("label {} out of range", bad.label)));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.max_grad_norm > 0.0) {
        return Err(NdcError::arg("batch_size, learning_rate and max_grad_norm must be positive"));
    }
    if !(cfg.final_lr_fraction > 0.0 && cfg.final_lr_fraction <= 1.0) {
        return Err(NdcError::arg("final_lr_fraction must lie in (0, 1]"));
    }

    let last = if scheme.needs_next_level() { schedule.steps() - 1 } else { schedule.steps() };
    let weights: Vec<f64> = (0..=last).map(|t| weight_at(scheme, schedule, t)).collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(NdcError::arg("weight scheme gives no usable timesteps"));
    }
    let mean_weight = total / weights.len() as f64;
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();

    let n_params = model.num_params();
    let mut adam = Adam::new(n_params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::substream(cfg.seed, &[0x5348, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let model_ref = &model;
            let parts = exec::map_indexed(chunks.len(), |c| {
                let mut grad = vec![0.0; n_params];
                let mut loss = 0.0;
                for &i in chunks[c] {
                    let mut r = rng::substream(cfg.seed, &[0x5458, epoch as u64, i as u64]);
                    let u: f64 = r.random();
                    let (t, w) = if cfg.importance_sampling {
                        (cumulative.partition_point(|&c| c < u).min(weights.len() - 1), mean_weight)
                    } else {
                        let t = ((u * weights.len() as f64) as usize).min(weights.len() - 1);
                        (t, weights[t])
                    };
                    let sigma = schedule.sigma(t);
                    let sample = &data[i];
                    let x: Vec<f64> = sample
                        .x
                        .iter()
                        .map(|v| {
                            let e: f64 = StandardNormal.sample(&mut r);
                            v + sigma * e
                        })
                        .collect();
                    loss += model_ref.accumulate_gradient(&x, sigma, sample.label, &sample.x, w, &mut grad);
                }
                (grad, loss)
            });
            let mut grad = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for (g, l) in parts {
                batch_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(NdcError::TrainingDiverged { epoch, step, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.max_grad_norm {
                let clip = cfg.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= clip);
            }
            let delta = adam.step(&grad, cfg.learning_rate_at(epoch * steps_per_epoch + step, total_steps));
            model.apply_update(&delta);
        }
        log.epoch_loss.push(epoch_loss / data.len() as f64);
    }
    Ok((model, log))
}
