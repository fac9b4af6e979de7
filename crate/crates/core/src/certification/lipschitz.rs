use serde::Serialize;

use super::stats::empirical_bernstein_lower;
use crate::classifiers::{DiffusionClassifier, Variant};
use crate::denoiser::{weight_at, Denoiser, WeightScheme};
use crate::error::{NdcError, Result};
use crate::exec;
use crate::rng;
use crate::schedule::{NoiseSchedule, TimestepSubset};

/// Lipschitz certificate for a DC classifier's probability output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzCertificate {
    pub predicted: usize,
    pub lipschitz_bound: f64,
    pub p_a_lower: f64,
    pub p_b_upper: f64,
    pub radius: f64,
    /// `1 − δ`.
    pub confidence: f64,
}

fn bound_from_ratios(ratios: impl Iterator<Item = f64>, len: usize, dim: usize) -> f64 {
    let sum: f64 = ratios.sum();
    sum / len as f64 * ((2.0 / std::f64::consts::PI).sqrt() + 2.0 / (dim as f64).sqrt())
        / (2.0 * std::f64::consts::SQRT_2)
}

/// `L = (1/(2√2))·Σ_{t∈S} w_t/(σ_t |S|)·(√(2/π) + 2/√D)`, a bound on the ℓ₂ Lipschitz
/// constant of every DC class probability when denoiser outputs lie in `[0, 1]^D`.
pub fn lipschitz_bound_dc(schedule: &NoiseSchedule, subset: &TimestepSubset, scheme: &WeightScheme, dim: usize) -> Result<f64> {
    if dim == 0 || subset.is_empty() {
        return Err(NdcError::arg("lipschitz bound needs dim >= 1 and a nonempty subset"));
    }
    let ratios = subset
        .iter()
        .map(|t| {
            let sigma = schedule.sigma(t);
            if sigma == 0.0 {
                return Err(NdcError::arg(format!("sigma_t = 0 at t = {t}; the bound needs positive noise levels")));
            }
            Ok(weight_at(scheme, schedule, t)? / sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(bound_from_ratios(ratios.into_iter(), subset.len(), dim))
}

/// `R = (p_A − p_B) / (2L)`, floored at zero.
pub fn lipschitz_radius(p_a_lower: f64, p_b_upper: f64, lipschitz_bound: f64) -> f64 {
    ((p_a_lower - p_b_upper) / (2.0 * lipschitz_bound)).max(0.0)
}

/// Largest radius attainable (`p_A = 1`, `p_B = 0`) over DC classifiers with `T′` evenly spaced
/// timesteps, for each `T′` in `t_primes`. Returns the maximizing `T′` and its radius.
pub fn dc_radius_supremum(
    schedule: &NoiseSchedule,
    scheme: &WeightScheme,
    dim: usize,
    t_primes: &[usize],
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &tp in t_primes {
        let subset = crate::classifiers::ClassifierConfig::dc(scheme.clone(), tp, 1).default_subset(schedule)?;
        let r = lipschitz_radius(1.0, 0.0, lipschitz_bound_dc(schedule, &subset, scheme, dim)?);
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((tp, r));
        }
    }
    best.ok_or_else(|| NdcError::arg("t_primes is empty"))
}

/// Certifies `x0` with the DC Lipschitz bound.
///
/// Draws `n_samples` independent Monte-Carlo probability vectors, picks the class
/// with the largest mean probability and bounds its mean from below (and the
/// runner-up's from above) with the empirical Bernstein inequality, splitting `δ`
/// between the two sides.
pub fn certify_lipschitz<D: Denoiser>(
    x0: &[f64],
    classifier: &DiffusionClassifier<D>,
    n_samples: usize,
    delta: f64,
    seed: u64,
) -> Result<LipschitzCertificate> {
    if classifier.config.variant != Variant::Dc {
        return Err(NdcError::arg("Lipschitz certification applies to the dc classifier"));
    }
    if n_samples < 2 {
        return Err(NdcError::arg("Lipschitz certification needs at least 2 samples"));
    }
    let k = classifier.num_classes();
    if k < 2 {
        return Err(NdcError::arg("Lipschitz certification needs at least 2 classes"));
    }
    let samples = exec::try_map_indexed(n_samples, |i| classifier.probabilities(x0, rng::derive_seed(seed, &[i as u64])))?;
    let mut mean = vec![0.0; k];
    for s in &samples {
        for (m, p) in mean.iter_mut().zip(s) {
            *m += p;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    let (a, b) = (order[0], order[1]);
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let pa: Vec<f64> = samples.iter().map(|s| clamp(s[a])).collect();
    let pb_comp: Vec<f64> = samples.iter().map(|s| clamp(1.0 - s[b])).collect();
    let p_a_lower = empirical_bernstein_lower(&pa, delta / 2.0)?.max(0.0);
    let p_b_upper = (1.0 - empirical_bernstein_lower(&pb_comp, delta / 2.0)?).min(1.0);

    let ratios = classifier.subset.iter().zip(classifier.weights()).map(|(t, w)| w / classifier.schedule.sigma(t));
    if classifier.subset.iter().any(|t| classifier.schedule.sigma(t) == 0.0) {
        return Err(NdcError::arg("the dc subset includes sigma = 0"));
    }
    let lipschitz_bound = bound_from_ratios(ratios, classifier.subset.len(), classifier.dim());
    Ok(LipschitzCertificate {
        predicted: a,
        lipschitz_bound,
        p_a_lower,
        p_b_upper,
        radius: lipschitz_radius(p_a_lower, p_b_upper, lipschitz_bound),
        confidence: 1.0 - delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ClassifierConfig;
    use crate::denoiser::{AnalyticDenoiser, ClipBox, Clipped, GaussianMixtureSpec};
    use crate::schedule::build_geometric_schedule;

    #[test]
    fn single_timestep_bound() {
        let s = NoiseSchedule::new(vec![0.5, 1.0, 2.0]).unwrap();
        let sub = TimestepSubset::new(vec![1], &s).unwrap();
        let l = lipschitz_bound_dc(&s, &sub, &WeightScheme::Uniform, 4).unwrap();
        let expect = ((2.0 / std::f64::consts::PI).sqrt() + 1.0) / (2.0 * std::f64::consts::SQRT_2);
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.6357).abs() < 1e-4);
        let r = lipschitz_radius(1.0, 0.0, l);
        assert!((r - std::f64::consts::SQRT_2 / (1.0 + (2.0 / std::f64::consts::PI).sqrt())).abs() < 1e-14);
        assert!((r - 0.7866).abs() < 1e-4);
        assert_eq!(lipschitz_radius(0.4, 0.4, l), 0.0);
        assert_eq!(lipschitz_radius(0.3, 0.4, l), 0.0);
    }

    #[test]
    fn bound_scaling() {
        let s = build_geometric_schedule(0.01, 10.0, 50, 7.0).unwrap();
        let sub = TimestepSubset::new(vec![3, 10, 40], &s).unwrap();
        let edm = WeightScheme::edm_default();
        let mut prev = f64::INFINITY;
        for d in [1, 2, 5, 30, 3072] {
            let l = lipschitz_bound_dc(&s, &sub, &edm, d).unwrap();
            assert!(l <= prev);
            prev = l;
        }
        let ratios = [0.3, 1.7, 4.0];
        let one = bound_from_ratios(ratios.iter().copied(), 3, 8);
        let two = bound_from_ratios(ratios.iter().map(|r| 2.0 * r), 3, 8);
        assert!((two - 2.0 * one).abs() < 1e-15);
        let zero = NoiseSchedule::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert!(lipschitz_bound_dc(&zero, &TimestepSubset::new(vec![0, 1], &zero).unwrap(), &WeightScheme::Uniform, 2).is_err());
    }

    #[test]
    fn certificate_on_separated_testbed() {
        let gm = GaussianMixtureSpec::two_class(2, 6.0, 1.0).unwrap().rescaled_to_unit_box(4.0).unwrap();
        let den = Clipped::new(AnalyticDenoiser::new(gm.clone()), ClipBox::unit(2)).unwrap();
        let s = build_geometric_schedule(0.002, 80.0, 100, 7.0).unwrap();
        let cfg = ClassifierConfig::dc(WeightScheme::truncated(WeightScheme::Uniform, 0.05), 10, 2);
        let c = DiffusionClassifier::new(den, s, cfg).unwrap();
        let cert = certify_lipschitz(gm.mean(1), &c, 50, 0.01, 3).unwrap();
        assert_eq!(cert.predicted, 1);
        assert!(cert.radius >= 0.0 && cert.radius.is_finite());
        assert!(cert.p_a_lower <= 1.0 && cert.p_b_upper >= 0.0);
        assert!(certify_lipschitz(gm.mean(1), &c, 1, 0.01, 3).is_err());
    }
}
