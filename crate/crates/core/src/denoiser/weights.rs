use serde::{Deserialize, Serialize};

use crate::error::{NdcError, Result};
use crate::schedule::NoiseSchedule;

/// Per-timestep loss weight `w_t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawScheme")]
pub enum WeightScheme {
    /// `(σ_{t+1} − σ_t) / σ_{t+1}³`, the weight of the variational bound.
    #[default]
    DerivedElbo,
    Uniform,
    /// `1 / σ_t`.
    Ddpm,
    /// `((σ² + σ_d²)/(σ² σ_d²)) · N(ln σ; k_μ, k_σ²)`: EDM loss weight times its σ sampling density.
    Edm {
        sigma_data: f64,
        k_mu: f64,
        k_sigma: f64,
    },
    /// `base(t)` where `σ_t > sigma_threshold`, zero elsewhere.
    Truncated { base: Box<WeightScheme>, sigma_threshold: f64 },
}

/// Flat form used for deserialization so that stray keys are rejected for every kind.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheme {
    kind: String,
    sigma_data: Option<f64>,
    k_mu: Option<f64>,
    k_sigma: Option<f64>,
    base: Option<Box<WeightScheme>>,
    sigma_threshold: Option<f64>,
}

impl TryFrom<RawScheme> for WeightScheme {
    type Error = String;

    fn try_from(r: RawScheme) -> std::result::Result<Self, String> {
        let edm_keys = r.sigma_data.is_some() || r.k_mu.is_some() || r.k_sigma.is_some();
        let trunc_keys = r.base.is_some() || r.sigma_threshold.is_some();
        let stray = |name: &str| Err(format!("unexpected parameters for weight scheme `{name}`"));
        match r.kind.as_str() {
            "derived_elbo" | "uniform" | "ddpm" if edm_keys || trunc_keys => stray(&r.kind),
            "derived_elbo" => Ok(WeightScheme::DerivedElbo),
            "uniform" => Ok(WeightScheme::Uniform),
            "ddpm" => Ok(WeightScheme::Ddpm),
            "edm" if trunc_keys => stray("edm"),
            "edm" => Ok(WeightScheme::Edm {
                sigma_data: r.sigma_data.unwrap_or_else(default_sigma_data),
                k_mu: r.k_mu.unwrap_or_else(default_k_mu),
                k_sigma: r.k_sigma.unwrap_or_else(default_k_sigma),
            }),
            "truncated" if edm_keys => stray("truncated"),
            "truncated" => Ok(WeightScheme::Truncated {
                base: r.base.ok_or("missing field `base`")?,
                sigma_threshold: r.sigma_threshold.ok_or("missing field `sigma_threshold`")?,
            }),
            other => Err(format!(
                "unknown weight scheme `{other}`, expected one of derived_elbo, uniform, ddpm, edm, truncated"
            )),
        }
    }
}

fn default_sigma_data() -> f64 {
    0.5
}
fn default_k_mu() -> f64 {
    -1.2
}
fn default_k_sigma() -> f64 {
    1.2
}

impl WeightScheme {
    pub fn edm_default() -> Self {
        WeightScheme::Edm { sigma_data: default_sigma_data(), k_mu: default_k_mu(), k_sigma: default_k_sigma() }
    }

    pub fn truncated(base: WeightScheme, sigma_threshold: f64) -> Self {
        WeightScheme::Truncated { base: Box::new(base), sigma_threshold }
    }

    /// Whether evaluating at the last index `T` is possible.
    pub fn needs_next_level(&self) -> bool {
        match self {
            WeightScheme::DerivedElbo => true,
            WeightScheme::Truncated { base, .. } => base.needs_next_level(),
            _ => false,
        }
    }
}

/// Weight of timestep `t` under `scheme`.
pub fn weight_at(scheme: &WeightScheme, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let steps = schedule.steps();
    if t > steps {
        return Err(NdcError::arg(format!("timestep {t} beyond T = {steps}")));
    }
    let sigma = schedule.sigma(t);
    let w = match scheme {
        WeightScheme::DerivedElbo => {
            if t >= steps {
                return Err(NdcError::arg(format!("derived weight needs t < T (t = {t}, T = {steps})")));
            }
            let next = schedule.sigma(t + 1);
            (next - sigma) / (next * next * next)
        }
        WeightScheme::Uniform => 1.0,
        WeightScheme::Ddpm => {
            if sigma == 0.0 {
                return Err(NdcError::arg("ddpm weight undefined at sigma = 0"));
            }
            1.0 / sigma
        }
        WeightScheme::Edm { sigma_data, k_mu, k_sigma } => {
            if sigma == 0.0 {
                return Err(NdcError::arg("edm weight undefined at sigma = 0"));
            }
            let (s2, d2) = (sigma * sigma, sigma_data * sigma_data);
            let z = sigma.ln() - k_mu;
            (s2 + d2) / (s2 * d2) / ((2.0 * std::f64::consts::PI).sqrt() * k_sigma)
                * (-z * z / (2.0 * k_sigma * k_sigma)).exp()
        }
        WeightScheme::Truncated { base, sigma_threshold } => {
            if sigma > *sigma_threshold {
                weight_at(base, schedule, t)?
            } else {
                0.0
            }
        }
    };
    debug_assert!(w >= 0.0);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_geometric_schedule;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(vec![0.4, 1.0, 2.0, 5.0]).unwrap()
    }

    #[test]
    fn examples() {
        let s = sched();
        assert_eq!(weight_at(&WeightScheme::Uniform, &s, 2).unwrap(), 1.0);
        assert_eq!(weight_at(&WeightScheme::DerivedElbo, &s, 1).unwrap(), 0.125);
        let tr = WeightScheme::truncated(WeightScheme::DerivedElbo, 0.5);
        assert_eq!(weight_at(&tr, &s, 0).unwrap(), 0.0);
        assert_eq!(weight_at(&tr, &s, 1).unwrap(), 0.125);
        assert_eq!(weight_at(&WeightScheme::Ddpm, &s, 2).unwrap(), 0.5);
    }

    #[test]
    fn edm_weight_value() {
        // σ = 1, σ_d = 0.5, k_μ = -1.2, k_σ = 1.2: 5 · exp(-0.5) / (1.2 √(2π))
        let s = sched();
        let w = weight_at(&WeightScheme::edm_default(), &s, 1).unwrap();
        let expect = 5.0 * (-0.5f64).exp() / (1.2 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((w - expect).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        let s = NoiseSchedule::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert!(weight_at(&WeightScheme::DerivedElbo, &s, 2).is_err());
        assert!(weight_at(&WeightScheme::Ddpm, &s, 0).is_err());
        assert!(weight_at(&WeightScheme::edm_default(), &s, 0).is_err());
        assert!(weight_at(&WeightScheme::Uniform, &s, 3).is_err());
    }

    #[test]
    fn json_shape() {
        let w: WeightScheme = serde_json::from_str(r#"{"kind":"edm"}"#).unwrap();
        assert_eq!(w, WeightScheme::edm_default());
        let t: WeightScheme =
            serde_json::from_str(r#"{"kind":"truncated","base":{"kind":"uniform"},"sigma_threshold":0.5}"#).unwrap();
        assert_eq!(t, WeightScheme::truncated(WeightScheme::Uniform, 0.5));
        assert!(serde_json::from_str::<WeightScheme>(r#"{"kind":"uniform","x":1}"#).is_err());
        assert!(serde_json::from_str::<WeightScheme>(r#"{"kind":"uniform","k_mu":1}"#).is_err());
        assert!(serde_json::from_str::<WeightScheme>(r#"{"kind":"cosine"}"#).is_err());
        let round = serde_json::to_string(&WeightScheme::truncated(WeightScheme::edm_default(), 0.1)).unwrap();
        assert_eq!(
            serde_json::from_str::<WeightScheme>(&round).unwrap(),
            WeightScheme::truncated(WeightScheme::edm_default(), 0.1)
        );
    }

    proptest! {
        #[test]
        fn weights_are_nonnegative(t in 0usize..200, thr in 0.0f64..5.0) {
            let s = build_geometric_schedule(0.002, 80.0, 200, 7.0).unwrap();
            for scheme in [
                WeightScheme::DerivedElbo,
                WeightScheme::Uniform,
                WeightScheme::Ddpm,
                WeightScheme::edm_default(),
                WeightScheme::truncated(WeightScheme::Ddpm, thr),
            ] {
                prop_assert!(weight_at(&scheme, &s, t).unwrap() >= 0.0);
            }
        }
    }
}
