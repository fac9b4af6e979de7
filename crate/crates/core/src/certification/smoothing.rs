use serde::{Deserialize, Serialize};

use super::stats::{binomial_test_two_sided, clopper_pearson_lower, phi_inverse};
use crate::classifiers::DiffusionClassifier;
use crate::denoiser::{Denoiser, GaussianMixtureSpec};
use crate::error::{NdcError, Result};
use crate::exec;
use crate::rng;

const STAGE_SELECT: u64 = 0;
const STAGE_ESTIMATE: u64 = 1;
const STAGE_PREDICT: u64 = 2;

/// A classifier that can be wrapped by randomized smoothing.
pub trait BaseClassifier: Sync {
    fn num_classes(&self) -> usize;

    /// Predicted class for one input; `seed` drives any internal Monte-Carlo.
    fn classify(&self, x: &[f64], seed: u64) -> Result<usize>;

    /// Noise level the classifier expects its inputs to carry, if it has one.
    fn input_sigma(&self) -> Option<f64> {
        None
    }
}

impl<D: Denoiser> BaseClassifier for DiffusionClassifier<D> {
    fn num_classes(&self) -> usize {
        DiffusionClassifier::num_classes(self)
    }

    fn classify(&self, x: &[f64], seed: u64) -> Result<usize> {
        self.predict(x, seed)
    }

    fn input_sigma(&self) -> Option<f64> {
        Some(DiffusionClassifier::input_sigma(self))
    }
}

impl<B: BaseClassifier + ?Sized> BaseClassifier for &B {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn classify(&self, x: &[f64], seed: u64) -> Result<usize> {
        (**self).classify(x, seed)
    }
    fn input_sigma(&self) -> Option<f64> {
        (**self).input_sigma()
    }
}

/// Always answers `class`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantClassifier {
    pub class: usize,
    pub num_classes: usize,
}

impl BaseClassifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn classify(&self, _x: &[f64], _seed: u64) -> Result<usize> {
        Ok(self.class)
    }
}

/// Exact Bayes classifier of a Gaussian mixture observed at noise level `sigma`.
#[derive(Debug, Clone)]
pub struct BayesClassifier {
    pub mixture: GaussianMixtureSpec,
    pub sigma: f64,
}

impl BaseClassifier for BayesClassifier {
    fn num_classes(&self) -> usize {
        self.mixture.num_classes()
    }
    fn classify(&self, x: &[f64], _seed: u64) -> Result<usize> {
        if x.len() != self.mixture.dim() {
            return Err(NdcError::DimensionMismatch { expected: self.mixture.dim(), got: x.len() });
        }
        Ok(self.mixture.bayes_class(x, self.sigma))
    }
    fn input_sigma(&self) -> Option<f64> {
        Some(self.sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    /// Smoothing standard deviation; must equal the base classifier's input noise level.
    pub noise_sigma: f64,
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { noise_sigma: 0.25, n0: 100, n: 1000, alpha: 0.001 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(NdcError::arg(format!("noise_sigma must be positive, got {}", self.noise_sigma)));
        }
        if self.n0 == 0 || self.n < self.n0 {
            return Err(NdcError::arg(format!("need 1 <= n0 <= n, got n0 = {}, n = {}", self.n0, self.n)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(NdcError::arg(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    fn check_base(&self, base: &(impl BaseClassifier + ?Sized)) -> Result<()> {
        self.validate()?;
        if let Some(s) = base.input_sigma() {
            if (s - self.noise_sigma).abs() > 1e-9 * s.max(self.noise_sigma) {
                return Err(NdcError::arg(format!(
                    "smoothing sigma {} does not match the classifier's input noise level {s}",
                    self.noise_sigma
                )));
            }
        }
        Ok(())
    }
}

/// Votes of the base classifier on `count` noisy copies `x0 + σ·ε`.
///
/// Draw `i` of `stage` reads its noise from the substream `(seed, stage, i)` and passes
/// an independent derived seed to the base classifier.
pub fn sample_votes(
    x0: &[f64],
    base: &(impl BaseClassifier + ?Sized),
    sigma: f64,
    count: usize,
    stage: u64,
    seed: u64,
) -> Result<Vec<u64>> {
    let k = base.num_classes();
    let votes = exec::try_map_indexed(count, |i| {
        let key = [stage, i as u64];
        let mut x = rng::gaussian_vec(seed, &key, x0.len());
        for (v, c) in x.iter_mut().zip(x0) {
            *v = c + sigma * *v;
        }
        base.classify(&x, rng::derive_seed(seed, &[stage, i as u64, 1]))
    })?;
    let mut counts = vec![0u64; k];
    for v in votes {
        if v >= k {
            return Err(NdcError::arg(format!("base classifier returned class {v} (K = {k})")));
        }
        counts[v] += 1;
    }
    Ok(counts)
}

/// Indices of the largest and second-largest counts, ties to the smaller index.
fn top_two(counts: &[u64]) -> (usize, usize) {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    (order[0], order.get(1).copied().unwrap_or(order[0]))
}

/// Randomized-smoothing PREDICT: `None` means abstain.
///
/// Takes `n0` votes and returns the top class only if an exact two-sided binomial test
/// between the top two counts rejects equality at level `alpha`.
pub fn smoothed_predict(
    x0: &[f64],
    base: &(impl BaseClassifier + ?Sized),
    smoothing: &SmoothingConfig,
    seed: u64,
) -> Result<Option<usize>> {
    smoothing.check_base(base)?;
    let counts = sample_votes(x0, base, smoothing.noise_sigma, smoothing.n0, STAGE_PREDICT, seed)?;
    let (a, b) = top_two(&counts);
    if a == b {
        return Ok(Some(a));
    }
    let (na, nb) = (counts[a], counts[b]);
    Ok((binomial_test_two_sided(na, na + nb)? <= smoothing.alpha).then_some(a))
}

/// Outcome of randomized-smoothing CERTIFY for one input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothedCertificate {
    /// `None` when the procedure abstains.
    pub pred: Option<usize>,
    pub p_a_lower: f64,
    pub radius: f64,
    pub selection_counts: Vec<u64>,
    pub estimation_counts: Vec<u64>,
}

/// Randomized-smoothing CERTIFY.
///
/// Selects the top class from `n0` votes, lower-bounds its probability from `n` fresh
/// votes with Clopper–Pearson at level `alpha`, takes `p_B = 1 − p_A` and certifies
/// radius `σ·Φ⁻¹(p_A)` when `p_A > 1/2`, abstaining otherwise.
pub fn smoothed_certify(
    x0: &[f64],
    base: &(impl BaseClassifier + ?Sized),
    smoothing: &SmoothingConfig,
    seed: u64,
) -> Result<SmoothedCertificate> {
    smoothing.check_base(base)?;
    let sigma = smoothing.noise_sigma;
    let selection_counts = sample_votes(x0, base, sigma, smoothing.n0, STAGE_SELECT, seed)?;
    let (top, _) = top_two(&selection_counts);
    let estimation_counts = sample_votes(x0, base, sigma, smoothing.n, STAGE_ESTIMATE, seed)?;
    let p_a_lower = clopper_pearson_lower(estimation_counts[top], smoothing.n as u64, smoothing.alpha)?;
    let (pred, radius) = if p_a_lower > 0.5 { (Some(top), sigma * phi_inverse(p_a_lower)?) } else { (None, 0.0) };
    Ok(SmoothedCertificate { pred, p_a_lower, radius, selection_counts, estimation_counts })
}

/// One row of a certification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationRecord {
    pub point_id: u64,
    pub true_label: usize,
    /// `None` means ABSTAIN.
    pub pred: Option<usize>,
    pub p_a_lower: f64,
    pub radius: f64,
    pub wall_ms: f64,
}

impl CertificationRecord {
    pub fn new(point_id: u64, true_label: usize, cert: &SmoothedCertificate, wall_ms: f64) -> Self {
        Self { point_id, true_label, pred: cert.pred, p_a_lower: cert.p_a_lower, radius: cert.radius, wall_ms }
    }

    pub fn abstained(&self) -> bool {
        self.pred.is_none()
    }

    /// Correct and certified at radius `r` or more.
    pub fn certified_at(&self, r: f64) -> bool {
        self.pred == Some(self.true_label) && self.radius >= r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Votes class 1 when the first coordinate is positive.
    struct Sign;

    impl BaseClassifier for Sign {
        fn num_classes(&self) -> usize {
            2
        }
        fn classify(&self, x: &[f64], _seed: u64) -> Result<usize> {
            Ok(usize::from(x[0] > 0.0))
        }
    }

    fn cfg(n0: usize, n: usize) -> SmoothingConfig {
        SmoothingConfig { noise_sigma: 0.25, n0, n, alpha: 0.001 }
    }

    #[test]
    fn unanimous_and_constant() {
        let c = ConstantClassifier { class: 2, num_classes: 3 };
        let s = SmoothingConfig { alpha: 0.05, ..cfg(10, 100) };
        for x in [[0.0, 0.0], [100.0, -3.0]] {
            assert_eq!(smoothed_predict(&x, &c, &s, 1).unwrap(), Some(2));
        }
        let cert = smoothed_certify(&[0.0, 0.0], &c, &cfg(10, 100), 1).unwrap();
        assert_eq!(cert.pred, Some(2));
        assert!((cert.p_a_lower - 0.001f64.powf(0.01)).abs() < 1e-10);
        // oracle: 0.25 · sqrt(2) · erfinv(2 · 0.001^0.01 − 1), mpmath
        assert!((cert.radius - 0.3751187560301591).abs() < 1e-9);
    }

    #[test]
    fn radius_grows_with_n() {
        let c = ConstantClassifier { class: 0, num_classes: 2 };
        let mut prev = 0.0;
        for n in [20, 50, 100, 400, 1000] {
            let r = smoothed_certify(&[0.0], &c, &cfg(10, n), 0).unwrap().radius;
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn even_split_abstains() {
        let s = SmoothingConfig { n0: 1000, n: 1000, ..cfg(1, 1) };
        assert_eq!(smoothed_predict(&[0.0], &Sign, &s, 4).unwrap(), None);
        let cert = smoothed_certify(&[0.0], &Sign, &s, 4).unwrap();
        assert_eq!(cert.pred, None);
        assert_eq!(cert.radius, 0.0);
        let far = smoothed_certify(&[2.0], &Sign, &s, 4).unwrap();
        assert_eq!(far.pred, Some(1));
        assert!(far.radius > 0.5);
    }

    #[test]
    fn determinism_and_validation() {
        let s = cfg(50, 200);
        let a = smoothed_certify(&[0.1], &Sign, &s, 9).unwrap();
        let b = smoothed_certify(&[0.1], &Sign, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selection_counts.iter().sum::<u64>(), 50);
        assert_eq!(a.estimation_counts.iter().sum::<u64>(), 200);
        assert!(smoothed_certify(&[0.1], &Sign, &cfg(0, 10), 9).is_err());
        assert!(smoothed_certify(&[0.1], &Sign, &cfg(20, 10), 9).is_err());
        let bayes = BayesClassifier { mixture: GaussianMixtureSpec::two_class(1, 6.0, 1.0).unwrap(), sigma: 0.5 };
        assert!(smoothed_predict(&[0.1], &bayes, &s, 0).is_err());
    }

    #[test]
    fn record_helpers() {
        let cert = SmoothedCertificate {
            pred: Some(1),
            p_a_lower: 0.9,
            radius: 0.3,
            selection_counts: vec![],
            estimation_counts: vec![],
        };
        let r = CertificationRecord::new(4, 1, &cert, 0.0);
        assert!(r.certified_at(0.0) && r.certified_at(0.3) && !r.certified_at(0.31));
        let wrong = CertificationRecord::new(4, 0, &cert, 0.0);
        assert!(!wrong.certified_at(0.0));
    }
}
