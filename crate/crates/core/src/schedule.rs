//! Discrete variance-exploding noise schedules.
//!
//! A schedule is an increasing grid `σ_0 < σ_1 < … < σ_T` with `x_t = x_0 + σ_t ε`.
//! Linear-interpolation models (`x_t = α_t x_0 + σ_t ε`) carry the extra `α_t`
//! column and are mapped onto the variance-exploding form by
//! [`linear_to_ve`] / [`ve_to_linear`].

use serde::{Deserialize, Serialize};

use crate::error::{NdcError, Result};

/// Default ratio between `σ_T` and the largest data norm.
pub const DEFAULT_PRIOR_RATIO: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alphas: Option<Vec<f64>>,
}

impl NoiseSchedule {
    /// Builds a variance-exploding schedule (all `α_t = 1`).
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(NdcError::InvalidSchedule(format!(
                "need at least two noise levels, got {}",
                sigmas.len()
            )));
        }
        if sigmas.iter().any(|s| !s.is_finite()) {
            return Err(NdcError::InvalidSchedule("non-finite sigma".into()));
        }
        if sigmas[0] < 0.0 {
            return Err(NdcError::InvalidSchedule(format!("sigma_0 = {} < 0", sigmas[0])));
        }
        if let Some(i) = sigmas.windows(2).position(|w| w[1] <= w[0]) {
            return Err(NdcError::InvalidSchedule(format!(
                "sigmas not strictly increasing at index {}: {} then {}",
                i + 1,
                sigmas[i],
                sigmas[i + 1]
            )));
        }
        Ok(Self { sigmas, alphas: None })
    }

    /// Attaches linear-schedule scales `α_t`.
    pub fn with_alphas(mut self, alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() != self.sigmas.len() {
            return Err(NdcError::InvalidSchedule(format!(
                "{} alphas for {} sigmas",
                alphas.len(),
                self.sigmas.len()
            )));
        }
        if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(NdcError::InvalidSchedule("alphas must be positive".into()));
        }
        if alphas[0] != 1.0 {
            return Err(NdcError::InvalidSchedule(format!("alpha_0 = {} must be 1", alphas[0])));
        }
        self.alphas = Some(alphas);
        Ok(self)
    }

    /// Number of transitions `T` (the grid has `T + 1` levels).
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[self.steps()]
    }

    /// `α_t`, 1 for variance-exploding schedules.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas.as_ref().map_or(1.0, |a| a[t])
    }

    pub fn alphas(&self) -> Option<&[f64]> {
        self.alphas.as_deref()
    }

    /// Checks that `σ_T ≥ max_data_norm · ratio`, so the prior KL term is negligible.
    pub fn check_prior_coverage(&self, max_data_norm: f64, ratio: f64) -> Result<()> {
        let need = max_data_norm * ratio;
        if self.sigma_max() < need {
            return Err(NdcError::InvalidSchedule(format!(
                "sigma_max = {} is below {} (= {} x max data norm {})",
                self.sigma_max(),
                need,
                ratio,
                max_data_norm
            )));
        }
        Ok(())
    }

    /// Index `t` with `σ_t == sigma` up to a relative tolerance.
    pub fn index_of(&self, sigma: f64, rel_tol: f64) -> Option<usize> {
        self.sigmas
            .iter()
            .position(|&s| (s - sigma).abs() <= rel_tol * sigma.abs().max(f64::MIN_POSITIVE))
    }

    /// Returns a schedule containing `sigma` exactly, inserting it if no grid level matches,
    /// together with its index.
    pub fn with_level(&self, sigma: f64) -> Result<(Self, usize)> {
        if let Some(i) = self.index_of(sigma, 1e-12) {
            let mut s = self.clone();
            s.sigmas[i] = sigma;
            return Ok((s, i));
        }
        if self.alphas.is_some() {
            return Err(NdcError::InvalidSchedule(
                "cannot insert a level into a linear schedule".into(),
            ));
        }
        let pos = self.sigmas.partition_point(|&s| s < sigma);
        let mut sigmas = self.sigmas.clone();
        sigmas.insert(pos, sigma);
        Ok((Self::new(sigmas)?, pos))
    }
}

/// ρ-power interpolated grid between `sigma_min` and `sigma_max` (increasing).
pub fn build_geometric_schedule(
    sigma_min: f64,
    sigma_max: f64,
    steps: usize,
    rho: f64,
) -> Result<NoiseSchedule> {
    if !(sigma_min > 0.0 && sigma_max > 0.0 && rho > 0.0) {
        return Err(NdcError::InvalidSchedule(format!(
            "bounds and rho must be positive (sigma_min={sigma_min}, sigma_max={sigma_max}, rho={rho})"
        )));
    }
    if sigma_min >= sigma_max {
        return Err(NdcError::InvalidSchedule(format!(
            "sigma_min {sigma_min} must be below sigma_max {sigma_max}"
        )));
    }
    if steps == 0 {
        return Err(NdcError::InvalidSchedule("T must be at least 1".into()));
    }
    let lo = sigma_min.powf(1.0 / rho);
    let hi = sigma_max.powf(1.0 / rho);
    let mut sigmas: Vec<f64> = (0..=steps)
        .map(|t| (hi + (1.0 - t as f64 / steps as f64) * (lo - hi)).powf(rho))
        .collect();
    sigmas[0] = sigma_min;
    sigmas[steps] = sigma_max;
    NoiseSchedule::new(sigmas)
}

/// Serialized schedule description used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Geometric {
        sigma_min: f64,
        sigma_max: f64,
        #[serde(rename = "T")]
        steps: usize,
        rho: f64,
    },
    Explicit {
        sigmas: Vec<f64>,
        #[serde(default)]
        alphas: Option<Vec<f64>>,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Geometric { sigma_min: 0.002, sigma_max: 80.0, steps: 1000, rho: 7.0 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::Geometric { sigma_min, sigma_max, steps, rho } => {
                build_geometric_schedule(*sigma_min, *sigma_max, *steps, *rho)
            }
            ScheduleSpec::Explicit { sigmas, alphas } => {
                let s = NoiseSchedule::new(sigmas.clone())?;
                match alphas {
                    Some(a) => s.with_alphas(a.clone()),
                    None => Ok(s),
                }
            }
        }
    }
}

/// Ordered, distinct schedule indices used by a classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSubset {
    indices: Vec<usize>,
}

impl TimestepSubset {
    pub fn new(indices: Vec<usize>, schedule: &NoiseSchedule) -> Result<Self> {
        if indices.is_empty() {
            return Err(NdcError::InvalidSubset("empty subset".into()));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(NdcError::InvalidSubset("indices must be strictly increasing".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i > schedule.steps()) {
            return Err(NdcError::InvalidSubset(format!(
                "index {bad} outside schedule with T = {}",
                schedule.steps()
            )));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }
}

/// `t_prime` indices evenly spaced over `[lower_cut, T]`.
pub fn uniform_subset(
    schedule: &NoiseSchedule,
    t_prime: usize,
    lower_cut: usize,
) -> Result<TimestepSubset> {
    uniform_subset_between(schedule, t_prime, lower_cut, schedule.steps())
}

/// `t_prime` indices evenly spaced over `[lower, upper]`, endpoints included when
/// `t_prime ≥ 2`. A single index is placed at the midpoint.
pub fn uniform_subset_between(
    schedule: &NoiseSchedule,
    t_prime: usize,
    lower: usize,
    upper: usize,
) -> Result<TimestepSubset> {
    if t_prime == 0 {
        return Err(NdcError::InvalidSubset("t_prime must be at least 1".into()));
    }
    if upper > schedule.steps() || lower > upper {
        return Err(NdcError::InvalidSubset(format!(
            "range [{lower}, {upper}] invalid for T = {}",
            schedule.steps()
        )));
    }
    let available = upper - lower + 1;
    if t_prime > available {
        return Err(NdcError::InvalidSubset(format!(
            "t_prime = {t_prime} exceeds the {available} indices in [{lower}, {upper}]"
        )));
    }
    let indices = if t_prime == 1 {
        vec![lower + (upper - lower) / 2]
    } else {
        let span = (upper - lower) as f64;
        let step = span / (t_prime - 1) as f64;
        (0..t_prime).map(|i| lower + (i as f64 * step).round() as usize).collect()
    };
    TimestepSubset::new(indices, schedule)
}

/// Maps a linear-schedule state to the variance-exploding input of `h`:
/// `(x_t / α_t, σ_t / α_t)`.
pub fn linear_to_ve(x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<(Vec<f64>, f64)> {
    let alphas = schedule
        .alphas()
        .ok_or_else(|| NdcError::arg("linear_to_ve needs a schedule with alphas"))?;
    let alpha = alphas[t];
    if alpha == 0.0 {
        return Err(NdcError::arg(format!("alpha_{t} is zero")));
    }
    Ok((x_t.iter().map(|v| v / alpha).collect(), schedule.sigma(t) / alpha))
}

/// Finds the linear-schedule step matching a variance-exploding level and recovers
/// the noise implied by an x₀ prediction.
///
/// `t = argmin_t |σ_t/α_t − sigma|` (ties go to the smaller `t`) and
/// `ε = (x_t − α_t x₀) / σ_t`.
pub fn ve_to_linear(
    x0_pred: &[f64],
    x_t: &[f64],
    sigma: f64,
    schedule: &NoiseSchedule,
) -> Result<(usize, Vec<f64>)> {
    let alphas = schedule
        .alphas()
        .ok_or_else(|| NdcError::arg("ve_to_linear needs a schedule with alphas"))?;
    if x0_pred.len() != x_t.len() {
        return Err(NdcError::DimensionMismatch { expected: x_t.len(), got: x0_pred.len() });
    }
    let mut best = 0usize;
    let mut best_gap = f64::INFINITY;
    for (t, (&s, &a)) in schedule.sigmas().iter().zip(alphas).enumerate() {
        let gap = (s / a - sigma).abs();
        if gap < best_gap {
            best_gap = gap;
            best = t;
        }
    }
    let (a, s) = (alphas[best], schedule.sigma(best));
    if s == 0.0 {
        return Err(NdcError::arg(format!("sigma_{best} is zero; noise is undefined")));
    }
    let eps = x_t.iter().zip(x0_pred).map(|(xt, x0)| (xt - a * x0) / s).collect();
    Ok((best, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_step_grid_is_the_endpoints() {
        let s = build_geometric_schedule(0.002, 80.0, 1, 7.0).unwrap();
        assert_eq!(s.sigmas(), &[0.002, 80.0]);
    }

    #[test]
    fn degenerate_range_stays_inside() {
        let eps = 1e-6;
        let s = build_geometric_schedule(1.0, 1.0 + eps, 10, 7.0).unwrap();
        assert!(s.sigmas().iter().all(|&v| (1.0..=1.0 + eps).contains(&v)));
    }

    #[test]
    fn edm_grid_midpoint_matches_formula() {
        let s = build_geometric_schedule(0.002, 80.0, 1000, 7.0).unwrap();
        // (0.002^(1/7) + 0.5 (80^(1/7) - 0.002^(1/7)))^7, 30-digit evaluation
        assert_relative_eq!(s.sigma(500), 2.515_218_976_147_158_6, max_relative = 1e-13);
        assert_relative_eq!(s.sigma(1), 0.002_050_146_467_528_989, max_relative = 1e-12);
        assert_eq!(s.sigma(0), 0.002);
        assert_eq!(s.sigma(1000), 80.0);
    }

    #[test]
    fn geometric_rejects_bad_input() {
        assert!(build_geometric_schedule(0.0, 1.0, 10, 7.0).is_err());
        assert!(build_geometric_schedule(1.0, 1.0, 10, 7.0).is_err());
        assert!(build_geometric_schedule(0.1, 1.0, 0, 7.0).is_err());
        assert!(build_geometric_schedule(0.1, 1.0, 3, -1.0).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(NoiseSchedule::new(vec![-0.1, 1.0]).is_err());
        let s = NoiseSchedule::new(vec![0.0, 0.5, 2.0]).unwrap();
        assert!(s.clone().with_alphas(vec![0.9, 0.8, 0.5]).is_err());
        assert!(s.clone().with_alphas(vec![1.0, 0.0, 0.5]).is_err());
        assert!(s.check_prior_coverage(0.1, 10.0).is_ok());
        assert!(s.check_prior_coverage(1.0, 10.0).is_err());
    }

    #[test]
    fn with_level_inserts_or_reuses() {
        let s = NoiseSchedule::new(vec![0.1, 0.2, 0.4, 0.8]).unwrap();
        let (same, i) = s.with_level(0.4).unwrap();
        assert_eq!((same.steps(), i), (3, 2));
        let (more, j) = s.with_level(0.25).unwrap();
        assert_eq!(more.sigmas(), &[0.1, 0.2, 0.25, 0.4, 0.8]);
        assert_eq!(j, 2);
    }

    fn grid(t: usize) -> NoiseSchedule {
        build_geometric_schedule(0.01, 10.0, t, 7.0).unwrap()
    }

    #[test]
    fn subset_examples() {
        assert_eq!(uniform_subset(&grid(10), 11, 0).unwrap().indices(), (0..=10).collect::<Vec<_>>());
        assert_eq!(uniform_subset(&grid(10), 2, 0).unwrap().indices(), &[0, 10]);
        assert_eq!(uniform_subset(&grid(100), 5, 0).unwrap().indices(), &[0, 25, 50, 75, 100]);
        assert_eq!(uniform_subset(&grid(100), 3, 20).unwrap().indices(), &[20, 60, 100]);
        assert_eq!(uniform_subset(&grid(10), 1, 2).unwrap().indices(), &[6]);
    }

    #[test]
    fn subset_errors() {
        assert!(uniform_subset(&grid(10), 0, 0).is_err());
        assert!(uniform_subset(&grid(10), 12, 0).is_err());
        assert!(uniform_subset(&grid(10), 9, 3).is_err());
        assert!(uniform_subset_between(&grid(10), 2, 5, 4).is_err());
    }

    fn linear_schedule() -> NoiseSchedule {
        NoiseSchedule::new(vec![0.0, 0.5, 1.0, 3.0])
            .unwrap()
            .with_alphas(vec![1.0, 0.9, 0.5, 0.3])
            .unwrap()
    }

    #[test]
    fn linear_to_ve_examples() {
        let s = linear_schedule();
        let (x, sig) = linear_to_ve(&[2.0, 2.0], 2, &s).unwrap();
        assert_eq!(x, vec![4.0, 4.0]);
        assert_eq!(sig, 2.0);

        let ve = NoiseSchedule::new(vec![0.0, 0.7]).unwrap().with_alphas(vec![1.0, 1.0]).unwrap();
        let (x, sig) = linear_to_ve(&[0.3, -1.0], 1, &ve).unwrap();
        assert_eq!(x, vec![0.3, -1.0]);
        assert_eq!(sig, 0.7);

        assert!(linear_to_ve(&[1.0], 1, &NoiseSchedule::new(vec![0.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn ve_to_linear_exact_match_and_ties() {
        let s = linear_schedule();
        // σ_t/α_t = [0, 0.5556, 2, 10]
        let (t, _) = ve_to_linear(&[0.0], &[1.0], 2.0, &s).unwrap();
        assert_eq!(t, 2);
        // equidistant from levels 0.5 and 1.5 -> smaller index
        let tied = NoiseSchedule::new(vec![0.0, 0.5, 1.5])
            .unwrap()
            .with_alphas(vec![1.0, 1.0, 1.0])
            .unwrap();
        let (t, _) = ve_to_linear(&[0.0], &[0.0], 1.0, &tied).unwrap();
        assert_eq!(t, 1);
    }

    #[test]
    fn ve_to_linear_recovers_noise() {
        let s = linear_schedule();
        let t = 3;
        let x0 = [0.25, -1.5, 2.0];
        let eps = [0.3, 1.1, -0.7];
        let xt: Vec<f64> =
            x0.iter().zip(&eps).map(|(a, e)| s.alpha(t) * a + s.sigma(t) * e).collect();
        let (x_ve, sig_ve) = linear_to_ve(&xt, t, &s).unwrap();
        assert_eq!(sig_ve, s.sigma(t) / s.alpha(t));
        let (t_back, eps_back) = ve_to_linear(&x0, &xt, sig_ve, &s).unwrap();
        assert_eq!(t_back, t);
        for (a, b) in eps_back.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-12);
        }
        // round trip on the input scale
        let back: Vec<f64> = x_ve.iter().map(|v| v * s.alpha(t)).collect();
        for (a, b) in back.iter().zip(&xt) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_roundtrip_through_json() {
        let spec = ScheduleSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"T\":1000"));
        let back: ScheduleSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.build().unwrap().steps(), 1000);
    }

    proptest! {
        #[test]
        fn geometric_grid_is_strictly_increasing(
            lo in 1e-3f64..1.0, ratio in 1.5f64..1e4, steps in 1usize..400, rho in 0.5f64..10.0
        ) {
            let s = build_geometric_schedule(lo, lo * ratio, steps, rho).unwrap();
            prop_assert_eq!(s.steps(), steps);
            prop_assert!(s.sigmas().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn uniform_subset_has_t_prime_distinct_indices(
            steps in 1usize..300, cut_frac in 0.0f64..1.0, tp_frac in 0.0f64..1.0
        ) {
            let s = grid(steps);
            let cut = ((steps as f64) * cut_frac) as usize;
            let avail = steps - cut + 1;
            let tp = 1 + ((avail - 1) as f64 * tp_frac) as usize;
            let sub = uniform_subset(&s, tp, cut).unwrap();
            prop_assert_eq!(sub.len(), tp);
            prop_assert!(sub.indices().iter().all(|&i| i >= cut && i <= steps));
            if tp >= 2 {
                prop_assert_eq!(sub.indices()[0], cut);
                prop_assert_eq!(*sub.indices().last().unwrap(), steps);
            }
        }
    }
}
