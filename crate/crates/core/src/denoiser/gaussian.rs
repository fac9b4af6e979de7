use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_call, Denoiser};
use crate::error::{NdcError, Result};

/// Isotropic Gaussian mixture `Σ_y π_y N(μ_y, s² I)`.
///
/// Every quantity the classifiers approximate has a closed form here: the
/// class-conditional posterior mean, the noisy marginal
/// `p(x_τ | y) = N(μ_y, (s² + σ_τ²) I)` and hence the Bayes classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    means: Vec<Vec<f64>>,
    class_std: f64,
    priors: Vec<f64>,
}

impl GaussianMixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, class_std: f64, priors: Vec<f64>) -> Result<Self> {
        let gm = Self { means, class_std, priors };
        gm.validate()?;
        Ok(gm)
    }

    /// Equal priors.
    pub fn balanced(means: Vec<Vec<f64>>, class_std: f64) -> Result<Self> {
        let k = means.len().max(1);
        Self::new(means, class_std, vec![1.0 / k as f64; k])
    }

    /// Two classes at `±separation/2` along the first axis of a `dim`-dimensional space.
    pub fn two_class(dim: usize, separation: f64, class_std: f64) -> Result<Self> {
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        if dim > 0 {
            a[0] = -separation / 2.0;
            b[0] = separation / 2.0;
        }
        Self::balanced(vec![a, b], class_std)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 {
            return Err(NdcError::arg("mixture needs at least one component"));
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(NdcError::arg("mixture dimension must be positive"));
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != d) {
            return Err(NdcError::DimensionMismatch { expected: d, got: m.len() });
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(NdcError::NonFinite("mixture means".into()));
        }
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            return Err(NdcError::arg(format!("class_std must be positive, got {}", self.class_std)));
        }
        if self.priors.len() != k {
            return Err(NdcError::arg(format!("{} priors for {k} components", self.priors.len())));
        }
        if self.priors.iter().any(|p| !(*p >= 0.0)) {
            return Err(NdcError::arg("priors must be nonnegative"));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(NdcError::arg(format!("priors sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self, y: usize) -> &[f64] {
        &self.means[y]
    }

    pub fn class_std(&self) -> f64 {
        self.class_std
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Image of the mixture under `x ↦ scale·x + shift` (still isotropic).
    pub fn affine(&self, scale: f64, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim() {
            return Err(NdcError::DimensionMismatch { expected: self.dim(), got: shift.len() });
        }
        let means = self
            .means
            .iter()
            .map(|m| m.iter().zip(shift).map(|(v, b)| scale * v + b).collect())
            .collect();
        Self::new(means, self.class_std * scale.abs(), self.priors.clone())
    }

    /// Affine map sending `[min μ − k·s, max μ + k·s]` (per coordinate, common scale)
    /// into `[0, 1]^D`, so almost all mass lands in the unit cube.
    pub fn unit_box_map(&self, num_std: f64) -> (f64, Vec<f64>) {
        let d = self.dim();
        let pad = num_std * self.class_std;
        let lo: Vec<f64> = (0..d)
            .map(|j| self.means.iter().map(|m| m[j]).fold(f64::INFINITY, f64::min) - pad)
            .collect();
        let hi: Vec<f64> = (0..d)
            .map(|j| self.means.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max) + pad)
            .collect();
        let width = lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max);
        let scale = 1.0 / width;
        // centre each coordinate's range in [0, 1]
        let shift = lo.iter().zip(&hi).map(|(l, h)| 0.5 - scale * 0.5 * (l + h)).collect();
        (scale, shift)
    }

    pub fn rescaled_to_unit_box(&self, num_std: f64) -> Result<Self> {
        let (scale, shift) = self.unit_box_map(num_std);
        self.affine(scale, &shift)
    }

    /// `ln N(x; μ_y, (s² + σ²) I)`.
    pub fn log_density_class(&self, x: &[f64], sigma: f64, y: usize) -> f64 {
        let var = self.class_std * self.class_std + sigma * sigma;
        let d = self.dim() as f64;
        let sq: f64 = x.iter().zip(&self.means[y]).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
    }

    /// `ln p(x)` for the mixture convolved with `N(0, σ² I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> f64 {
        let terms: Vec<f64> = (0..self.num_classes())
            .filter(|&y| self.priors[y] > 0.0)
            .map(|y| self.priors[y].ln() + self.log_density_class(x, sigma, y))
            .collect();
        log_sum_exp(&terms)
    }

    /// Exact `p(y | x_σ)`.
    pub fn posterior(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.num_classes())
            .map(|y| {
                if self.priors[y] > 0.0 {
                    self.priors[y].ln() + self.log_density_class(x, sigma, y)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Bayes-optimal label for an input at noise level σ (ties to the smaller index).
    pub fn bayes_class(&self, x: &[f64], sigma: f64) -> usize {
        argmax(&self.posterior(x, sigma))
    }

    /// Draws a point from component `y`.
    pub fn sample_class<R: Rng + ?Sized>(&self, y: usize, rng: &mut R) -> Vec<f64> {
        self.means[y]
            .iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                m + self.class_std * e
            })
            .collect()
    }

    /// Draws a label from the priors.
    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (y, p) in self.priors.iter().enumerate() {
            acc += p;
            if u < acc {
                return y;
            }
        }
        // rounding: fall back to the last class with positive prior
        self.priors.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// Largest `‖μ_y‖ + 4s`, a practical bound on data norms for prior checks.
    pub fn max_data_norm(&self) -> f64 {
        self.means
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
            + 4.0 * self.class_std * (self.dim() as f64).sqrt()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Posterior mean `E[x₀ | x_σ = x, y] = (s²·x + σ²·μ_y)/(s² + σ²)`.
///
/// Written as `x + λ(μ_y − x)` with `λ = σ²/(s² + σ²)` so that σ = 0 returns `x` exactly.
pub fn analytic_denoise(gm: &GaussianMixtureSpec, x: &[f64], sigma: f64, y: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    analytic_into(gm, x, sigma, y, &mut out);
    out
}

fn analytic_into(gm: &GaussianMixtureSpec, x: &[f64], sigma: f64, y: usize, out: &mut [f64]) {
    let s2 = gm.class_std * gm.class_std;
    let v2 = sigma * sigma;
    let lambda = if v2.is_infinite() { 1.0 } else { v2 / (s2 + v2) };
    for ((o, xi), mi) in out.iter_mut().zip(x).zip(&gm.means[y]) {
        *o = xi + lambda * (mi - xi);
    }
}

/// The Bayes-optimal denoiser of a [`GaussianMixtureSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticDenoiser {
    gm: GaussianMixtureSpec,
}

impl AnalyticDenoiser {
    pub fn new(gm: GaussianMixtureSpec) -> Self {
        Self { gm }
    }

    pub fn mixture(&self) -> &GaussianMixtureSpec {
        &self.gm
    }
}

impl Denoiser for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.gm.dim()
    }

    fn num_classes(&self) -> usize {
        self.gm.num_classes()
    }

    fn class_priors(&self) -> Vec<f64> {
        self.gm.priors.clone()
    }

    fn denoise_into(&self, x: &[f64], sigma: f64, class: usize, out: &mut [f64]) -> Result<()> {
        check_call(self, x, class, out)?;
        if !(sigma >= 0.0) {
            return Err(NdcError::arg(format!("sigma must be nonnegative, got {sigma}")));
        }
        analytic_into(&self.gm, x, sigma, class, out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn gm2() -> GaussianMixtureSpec {
        GaussianMixtureSpec::new(vec![vec![0.0, 0.0], vec![3.0, -1.0]], 1.0, vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GaussianMixtureSpec::new(vec![vec![0.0], vec![1.0, 2.0]], 1.0, vec![0.5, 0.5]).is_err());
        assert!(GaussianMixtureSpec::new(vec![vec![0.0], vec![1.0]], 0.0, vec![0.5, 0.5]).is_err());
        assert!(GaussianMixtureSpec::new(vec![vec![0.0], vec![1.0]], 1.0, vec![0.6, 0.5]).is_err());
        assert!(GaussianMixtureSpec::new(vec![vec![0.0], vec![1.0]], 1.0, vec![0.5]).is_err());
    }

    #[test]
    fn zero_noise_returns_input() {
        let x = [0.123, -4.5];
        assert_eq!(analytic_denoise(&gm2(), &x, 0.0, 1), x.to_vec());
    }

    #[test]
    fn huge_noise_returns_mean() {
        let h = analytic_denoise(&gm2(), &[10.0, 10.0], 1e9, 1);
        assert!((h[0] - 3.0).abs() < 1e-12 && (h[1] + 1.0).abs() < 1e-12);
        assert_eq!(analytic_denoise(&gm2(), &[10.0, 10.0], f64::INFINITY, 1), vec![3.0, -1.0]);
    }

    #[test]
    fn unit_noise_halfway() {
        // s = 1, σ = 1, μ = 0: (x + μ)/2
        assert_eq!(analytic_denoise(&gm2(), &[2.0, 2.0], 1.0, 0), vec![1.0, 1.0]);
    }

    #[test]
    fn posterior_matches_bayes_rule() {
        let gm = GaussianMixtureSpec::new(vec![vec![0.0], vec![2.0]], 1.0, vec![0.25, 0.75]).unwrap();
        let x = [0.7];
        let sigma = 0.5;
        let v = 1.25f64;
        let l0 = 0.25 * (-(0.7f64).powi(2) / (2.0 * v)).exp();
        let l1 = 0.75 * (-(0.7f64 - 2.0).powi(2) / (2.0 * v)).exp();
        let p = gm.posterior(&x, sigma);
        assert!((p[0] - l0 / (l0 + l1)).abs() < 1e-14);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn unit_box_rescaling_keeps_isotropy() {
        let gm = gm2();
        let unit = gm.rescaled_to_unit_box(4.0).unwrap();
        for m in unit.means() {
            assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(unit.class_std() < gm.class_std());
        let (scale, _) = gm.unit_box_map(4.0);
        assert!((unit.class_std() - scale).abs() < 1e-15);
    }

    #[test]
    fn sampled_labels_follow_priors() {
        let gm = GaussianMixtureSpec::new(vec![vec![0.0], vec![1.0], vec![2.0]], 1.0, vec![0.2, 0.3, 0.5])
            .unwrap();
        let mut r = rng::substream(5, &[0]);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[gm.sample_label(&mut r)] += 1;
        }
        for (c, p) in counts.iter().zip(gm.priors()) {
            let sd = (20_000.0 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - 20_000.0 * p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn analytic_is_the_mse_minimizer() {
        // Perturbing the shrinkage coefficient by ±0.1 never lowers the empirical MSE.
        let gm = gm2();
        let s2 = gm.class_std().powi(2);
        for (k, &sigma) in [0.3, 1.0, 2.5].iter().enumerate() {
            let lambda = sigma * sigma / (s2 + sigma * sigma);
            let mut r = rng::substream(42, &[k as u64]);
            let mut mse = [0.0f64; 3];
            for i in 0..2000 {
                let x0 = gm.sample_class(1, &mut r);
                let e = rng::gaussian_vec(42, &[k as u64, i], 2);
                let x: Vec<f64> = x0.iter().zip(&e).map(|(a, b)| a + sigma * b).collect();
                for (j, dl) in [0.0, 0.1, -0.1].iter().enumerate() {
                    let l = lambda + dl;
                    let err: f64 = x
                        .iter()
                        .zip(gm.mean(1))
                        .zip(&x0)
                        .map(|((xi, mi), ti)| (xi + l * (mi - xi) - ti).powi(2))
                        .sum();
                    mse[j] += err;
                }
            }
            assert!(mse[0] <= mse[1] && mse[0] <= mse[2], "sigma {sigma}: {mse:?}");
        }
    }

    proptest! {
        #[test]
        fn denoised_point_lies_between_input_and_mean(
            x0 in -10.0f64..10.0, x1 in -10.0f64..10.0, sigma in 0.0f64..100.0, y in 0usize..2
        ) {
            let gm = gm2();
            let x = [x0, x1];
            let h = analytic_denoise(&gm, &x, sigma, y);
            for j in 0..2 {
                let (lo, hi) = if x[j] <= gm.mean(y)[j] { (x[j], gm.mean(y)[j]) } else { (gm.mean(y)[j], x[j]) };
                prop_assert!(h[j] >= lo - 1e-12 && h[j] <= hi + 1e-12);
            }
        }
    }
}
