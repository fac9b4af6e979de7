//! Class pruning: Sift-and-Refine and discrete progressive class selection.
//!
//! Both work on accumulated per-timestep losses (lower is better) provided by a
//! [`TimestepEvaluator`]. One evaluator call is one (class, timestep) loss.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::classifiers::{DiffusionClassifier, Variant};
use crate::denoiser::Denoiser;
use crate::error::{NdcError, Result};
use crate::exec;
use crate::schedule::{NoiseSchedule, TimestepSubset};

/// Per-timestep, per-class losses for one fixed input.
pub trait TimestepEvaluator: Sync {
    fn num_classes(&self) -> usize;

    /// Loss of each class in `classes` at timestep `t`, in the same order.
    fn losses(&self, t: usize, classes: &[usize]) -> Result<Vec<f64>>;
}

/// Binds a diffusion classifier to one input and seed, counting (class, timestep) evaluations.
pub struct ClassifierEvaluator<'a, D> {
    classifier: &'a DiffusionClassifier<D>,
    x: Vec<f64>,
    anchor: Option<Vec<f64>>,
    seed: u64,
    calls: AtomicU64,
}

impl<'a, D: Denoiser> ClassifierEvaluator<'a, D> {
    /// Pruning compares losses across classes, so the classifier must share noise.
    pub fn new(classifier: &'a DiffusionClassifier<D>, x: &[f64], seed: u64) -> Result<Self> {
        if !classifier.config.shared_noise {
            return Err(NdcError::arg("class pruning requires shared noise across classes"));
        }
        if x.len() != classifier.dim() {
            return Err(NdcError::DimensionMismatch { expected: classifier.dim(), got: x.len() });
        }
        let anchor = match classifier.config.variant {
            Variant::Apndc => Some(classifier.anchor(x)?),
            _ => None,
        };
        Ok(Self { classifier, x: x.to_vec(), anchor, seed, calls: AtomicU64::new(0) })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser> TimestepEvaluator for ClassifierEvaluator<'_, D> {
    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn losses(&self, t: usize, classes: &[usize]) -> Result<Vec<f64>> {
        self.calls.fetch_add(classes.len() as u64, Ordering::Relaxed);
        let w = self.classifier.weight_for(t)?;
        self.classifier.losses_at(&self.x, self.anchor.as_deref(), t, w, classes, self.seed)
    }
}

/// Counts calls on any evaluator.
pub struct Counting<E> {
    pub inner: E,
    calls: AtomicU64,
}

impl<E> Counting<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<E: TimestepEvaluator> TimestepEvaluator for Counting<E> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn losses(&self, t: usize, classes: &[usize]) -> Result<Vec<f64>> {
        self.calls.fetch_add(classes.len() as u64, Ordering::Relaxed);
        self.inner.losses(t, classes)
    }
}

/// Sums losses over `timesteps` for `classes`, evaluating timesteps in parallel.
pub fn accumulate(eval: &impl TimestepEvaluator, timesteps: &[usize], classes: &[usize]) -> Result<Vec<f64>> {
    let parts = exec::try_map_indexed(timesteps.len(), |i| eval.losses(timesteps[i], classes))?;
    let mut total = vec![0.0; classes.len()];
    for p in parts {
        for (a, b) in total.iter_mut().zip(&p) {
            *a += b;
        }
    }
    Ok(total)
}

/// Position of the smallest value, ties to the earliest.
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiftConfig {
    pub sift_timesteps: TimestepSubset,
    pub refine_timesteps: TimestepSubset,
    /// Accumulated-loss gap beyond which a class is dropped, in units of the
    /// per-timestep normalized loss.
    pub threshold: f64,
    /// Keep the sift-phase losses when accumulating the refine phase.
    #[serde(default)]
    pub reuse_sift_losses: bool,
}

impl SiftConfig {
    pub fn new(sift_timesteps: TimestepSubset, refine_timesteps: TimestepSubset, threshold: f64) -> Result<Self> {
        let c = Self { sift_timesteps, refine_timesteps, threshold, reuse_sift_losses: false };
        c.validate(None)?;
        Ok(c)
    }

    pub fn validate(&self, schedule: Option<&NoiseSchedule>) -> Result<()> {
        if !(self.threshold >= 0.0) {
            return Err(NdcError::arg(format!("sift threshold must be nonnegative, got {}", self.threshold)));
        }
        if self.refine_timesteps.is_empty() {
            return Err(NdcError::InvalidSubset("refine timesteps are empty".into()));
        }
        if let Some(s) = schedule {
            TimestepSubset::new(self.sift_timesteps.indices().to_vec(), s)?;
            TimestepSubset::new(self.refine_timesteps.indices().to_vec(), s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    pub class: usize,
    /// Classes alive after the sift phase, ascending.
    pub survivors: Vec<usize>,
    /// Survivor count after each sift timestep.
    pub history: Vec<usize>,
}

/// Sift-and-Refine.
///
/// Sift timesteps are processed one at a time: every surviving class accumulates its
/// loss, and classes whose total exceeds the running minimum by more than
/// `threshold` are dropped. Once one class is left it is returned. Otherwise the
/// survivors are scored over the refine timesteps, from zero unless
/// `reuse_sift_losses` is set, and the lowest total wins (ties to the smaller index).
pub fn sift_and_refine(eval: &impl TimestepEvaluator, config: &SiftConfig) -> Result<SiftOutcome> {
    config.validate(None)?;
    let mut alive: Vec<usize> = (0..eval.num_classes()).collect();
    if alive.is_empty() {
        return Err(NdcError::arg("evaluator has no classes"));
    }
    let mut acc = vec![0.0; alive.len()];
    let mut history = Vec::new();
    for t in config.sift_timesteps.iter() {
        if alive.len() == 1 {
            break;
        }
        let l = eval.losses(t, &alive)?;
        for (a, b) in acc.iter_mut().zip(&l) {
            *a += b;
        }
        let best = acc[argmin(&acc)];
        let keep: Vec<bool> = acc.iter().map(|&e| e - best <= config.threshold).collect();
        assert!(keep.iter().any(|&k| k), "the running minimum always survives");
        let mut i = 0;
        alive.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        acc.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        history.push(alive.len());
    }
    if alive.len() == 1 {
        return Ok(SiftOutcome { class: alive[0], survivors: alive, history });
    }
    let refine = accumulate(eval, config.refine_timesteps.indices(), &alive)?;
    let total: Vec<f64> = if config.reuse_sift_losses {
        refine.iter().zip(&acc).map(|(r, s)| r + s).collect()
    } else {
        refine
    };
    Ok(SiftOutcome { class: alive[argmin(&total)], survivors: alive, history })
}

/// Stage plan for progressive class selection: after `timestep_checkpoints[i]`
/// timesteps only the best `class_counts[i]` classes are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressiveTrajectory {
    pub class_counts: Vec<usize>,
    pub timestep_checkpoints: Vec<usize>,
}

impl ProgressiveTrajectory {
    pub fn new(class_counts: Vec<usize>, timestep_checkpoints: Vec<usize>) -> Result<Self> {
        let t = Self { class_counts, timestep_checkpoints };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, p) = (&self.class_counts, &self.timestep_checkpoints);
        if c.is_empty() || c.len() != p.len() {
            return Err(NdcError::arg("trajectory needs equally long, nonempty class_counts and timestep_checkpoints"));
        }
        if c.windows(2).any(|w| w[1] >= w[0]) || c[c.len() - 1] == 0 {
            return Err(NdcError::arg("class_counts must be strictly decreasing and positive"));
        }
        if p[0] == 0 || p.windows(2).any(|w| w[1] <= w[0]) {
            return Err(NdcError::arg("timestep_checkpoints must be positive and strictly increasing"));
        }
        Ok(())
    }

    /// `Σ_i c_{i−1}·(p_i − p_{i−1})` with `c_{−1} = K`, `p_{−1} = 0`.
    pub fn evaluator_calls(&self, num_classes: usize) -> u64 {
        let mut prev_c = num_classes as u64;
        let mut prev_p = 0u64;
        let mut total = 0;
        for (&c, &p) in self.class_counts.iter().zip(&self.timestep_checkpoints) {
            total += prev_c * (p as u64 - prev_p);
            prev_c = c as u64;
            prev_p = p as u64;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveOutcome {
    /// Surviving classes, best first.
    pub survivors: Vec<usize>,
    /// Accumulated losses of the survivors, aligned with `survivors`.
    pub losses: Vec<f64>,
}

/// Discrete progressive class selection over `timesteps` (in evaluation order).
///
/// Stage `i` evaluates timesteps `[p_{i−1}, p_i)` for the surviving classes, adds them
/// to the accumulated losses and keeps the `c_i` best classes (ties to the smaller index).
pub fn progressive_select(
    eval: &impl TimestepEvaluator,
    timesteps: &[usize],
    traj: &ProgressiveTrajectory,
) -> Result<ProgressiveOutcome> {
    traj.validate()?;
    let k = eval.num_classes();
    if traj.class_counts[0] > k {
        return Err(NdcError::arg(format!("first class count {} exceeds K = {k}", traj.class_counts[0])));
    }
    let last = *traj.timestep_checkpoints.last().expect("nonempty");
    if last > timesteps.len() {
        return Err(NdcError::arg(format!("trajectory needs {last} timesteps, {} given", timesteps.len())));
    }
    let mut alive: Vec<usize> = (0..k).collect();
    let mut acc = vec![0.0; k];
    let mut start = 0;
    for (&keep, &stop) in traj.class_counts.iter().zip(&traj.timestep_checkpoints) {
        let l = accumulate(eval, &timesteps[start..stop], &alive)?;
        for (a, b) in acc.iter_mut().zip(&l) {
            *a += b;
        }
        let mut order: Vec<usize> = (0..alive.len()).collect();
        order.sort_by(|&a, &b| acc[a].total_cmp(&acc[b]).then(alive[a].cmp(&alive[b])));
        order.truncate(keep);
        alive = order.iter().map(|&i| alive[i]).collect();
        acc = order.iter().map(|&i| acc[i]).collect();
        start = stop;
    }
    Ok(ProgressiveOutcome { survivors: alive, losses: acc })
}
