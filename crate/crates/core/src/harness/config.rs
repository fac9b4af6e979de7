use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certification::SmoothingConfig;
use crate::classifiers::{ClassifierConfig, Variant};
use crate::denoiser::{Activation, GaussianMixtureSpec, TrainConfig, WeightScheme};
use crate::error::{NdcError, Result};
use crate::schedule::ScheduleSpec;

/// Top-level experiment description, read from JSON. Unknown keys are rejected.
///
/// Every section has defaults, so `{}` is a valid config: a two-class 2-D mixture
/// with means 6 standard deviations apart, the EDM grid, EPNDC at σ_τ = 0.25 and
/// the analytic denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mixture: GaussianMixtureSpec,
    pub data: DataConfig,
    pub schedule: ScheduleSpec,
    pub classifier: ClassifierSection,
    pub smoothing: SmoothingConfig,
    /// Certification radii in units of the mixture's class standard deviation.
    pub radius_grid: Vec<f64>,
    pub denoiser: DenoiserSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lipschitz: LipschitzConfig,
    pub sift: SiftBenchConfig,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Record per-point wall-clock time; off keeps output files byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mixture: GaussianMixtureSpec::two_class(2, 6.0, 1.0).expect("valid default mixture"),
            data: DataConfig::default(),
            schedule: ScheduleSpec::default(),
            classifier: ClassifierSection::default(),
            smoothing: SmoothingConfig::default(),
            radius_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            denoiser: DenoiserSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lipschitz: LipschitzConfig::default(),
            sift: SiftBenchConfig::default(),
            seed: 0,
            output: None,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Read test points from this CSV instead of sampling them.
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 4000, n_test: 200, test_path: None }
    }
}

/// Classifier settings; the input noise index is derived from the smoothing σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub variant: Variant,
    pub scheme: WeightScheme,
    pub t_prime: usize,
    pub mc_per_timestep: usize,
    pub shared_noise: bool,
    pub epndc_reweight: bool,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            variant: Variant::Epndc,
            scheme: WeightScheme::DerivedElbo,
            t_prime: 32,
            mc_per_timestep: 1,
            shared_noise: true,
            epndc_reweight: false,
        }
    }
}

impl ClassifierSection {
    pub fn to_config(&self, tau_index: usize) -> ClassifierConfig {
        ClassifierConfig {
            variant: self.variant,
            scheme: self.scheme.clone(),
            t_prime: self.t_prime,
            mc_per_timestep: self.mc_per_timestep,
            shared_noise: self.shared_noise,
            tau_index: if self.variant == Variant::Dc { 0 } else { tau_index },
            epndc_reweight: self.epndc_reweight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSource {
    /// Closed-form posterior mean of the configured mixture.
    #[default]
    Analytic,
    /// A trained MLP checkpoint.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Preconditioning scale; the within-class standard deviation suits class-conditional models.
    pub sigma_data: f64,
    /// Weight scheme of the training objective.
    pub scheme: WeightScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], activation: Activation::Silu, sigma_data: 1.0, scheme: WeightScheme::Ddpm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzConfig {
    /// Mixture is mapped into `[0, 1]^D` so that ±`num_std` class deviations fit.
    pub num_std: f64,
    pub n_samples: usize,
    pub delta: f64,
    /// `T′` values swept for the radius supremum.
    pub t_prime_sweep: Vec<usize>,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self { num_std: 4.0, n_samples: 100, delta: 0.001, t_prime_sweep: vec![10, 25, 50, 100, 250, 500, 1000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiftBenchConfig {
    /// Number of evenly spaced sift timesteps.
    pub sift_t_prime: usize,
    /// Fixed pruning threshold; calibrated from loss-gap fluctuations when absent.
    pub threshold: Option<f64>,
    /// Calibrated threshold as a multiple of the per-timestep loss-gap standard deviation.
    pub std_multiple: f64,
    pub calibration_points: usize,
    pub calibration_seeds: usize,
    pub reuse_sift_losses: bool,
}

impl Default for SiftBenchConfig {
    fn default() -> Self {
        Self {
            sift_t_prime: 4,
            threshold: None,
            std_multiple: 5.0,
            calibration_points: 20,
            calibration_seeds: 10,
            reuse_sift_losses: false,
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> NdcError {
    NdcError::Config { path: path.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Parses JSON, reporting the failing field path, then validates.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| config_err(".", format!("cannot read {}: {e}", p.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Semantic checks, each naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let wrap = |path: &'static str| move |e: NdcError| config_err(path, e.to_string());
        self.mixture.validate().map_err(wrap("mixture"))?;
        self.schedule.build().map_err(wrap("schedule"))?;
        self.smoothing.validate().map_err(wrap("smoothing"))?;
        if self.data.n_test == 0 && self.data.test_path.is_none() {
            return Err(config_err("data.n_test", "must be at least 1"));
        }
        let c = &self.classifier;
        if c.t_prime == 0 {
            return Err(config_err("classifier.t_prime", "must be at least 1"));
        }
        if c.mc_per_timestep == 0 {
            return Err(config_err("classifier.mc_per_timestep", "must be at least 1"));
        }
        let g = &self.radius_grid;
        if g.is_empty() || g.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("radius_grid", "must be nonempty, nonnegative and strictly increasing"));
        }
        if self.model.hidden.contains(&0) {
            return Err(config_err("model.hidden", "layer widths must be positive"));
        }
        if !(self.model.sigma_data > 0.0) {
            return Err(config_err("model.sigma_data", "must be positive"));
        }
        if !(self.lipschitz.num_std > 0.0) {
            return Err(config_err("lipschitz.num_std", "must be positive"));
        }
        if !(self.lipschitz.delta > 0.0 && self.lipschitz.delta < 1.0) {
            return Err(config_err("lipschitz.delta", "must lie in (0, 1)"));
        }
        if self.lipschitz.n_samples < 2 {
            return Err(config_err("lipschitz.n_samples", "must be at least 2"));
        }
        if self.sift.threshold.is_some_and(|t| !(t >= 0.0)) {
            return Err(config_err("sift.threshold", "must be nonnegative"));
        }
        if self.sift.sift_t_prime == 0 {
            return Err(config_err("sift.sift_t_prime", "must be at least 1"));
        }
        Ok(())
    }
}
