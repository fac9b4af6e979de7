use std::time::Instant;

use serde::Serialize;

use super::config::{DenoiserSource, ExperimentConfig};
use super::dataset::{gen_dataset, read_samples_csv};
use super::output::ResultTable;
use crate::acceleration::{sift_and_refine, ClassifierEvaluator, SiftConfig, TimestepEvaluator};
use crate::certification::{
    certify_lipschitz, dc_radius_supremum, smoothed_certify, BaseClassifier, BayesClassifier, CertificationRecord,
    SmoothedCertificate,
};
use crate::classifiers::{ClassifierConfig, DiffusionClassifier, Variant};
use crate::denoiser::{
    load_checkpoint, train_denoiser, AnalyticDenoiser, ClipBox, Clipped, CountingDenoiser, Denoiser,
    GaussianMixtureSpec, LabeledSample, MlpDenoiser, TrainingLog,
};
use crate::error::{NdcError, Result};
use crate::exec;
use crate::rng;
use crate::schedule::{uniform_subset_between, NoiseSchedule};

const POINT: u64 = 0x706f;
const NOISY_INPUT: u64 = 0x6e69;
const CALIBRATE: u64 = 0x6361;

pub type BoxedDenoiser = Box<dyn Denoiser + Send>;

/// Everything a run needs, resolved from an [`ExperimentConfig`].
pub struct Setup {
    pub config: ExperimentConfig,
    /// Mixture in the coordinates the classifier sees (rescaled to the unit box for DC).
    pub mixture: GaussianMixtureSpec,
    pub schedule: NoiseSchedule,
    pub classifier_config: ClassifierConfig,
    pub denoiser: BoxedDenoiser,
    pub test: Vec<LabeledSample>,
    /// Affine map from raw data to classifier coordinates.
    map: Option<(f64, Vec<f64>)>,
}

fn config_err(path: &str, e: impl std::fmt::Display) -> NdcError {
    NdcError::Config { path: path.into(), message: e.to_string() }
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dc = config.classifier.variant == Variant::Dc;
        let base = config.schedule.build()?;
        let (schedule, tau) = if dc {
            (base, 0)
        } else {
            base.with_level(config.smoothing.noise_sigma).map_err(|e| config_err("smoothing.noise_sigma", e))?
        };
        let map = dc.then(|| config.mixture.unit_box_map(config.lipschitz.num_std));
        let mixture = match &map {
            Some((scale, shift)) => config.mixture.affine(*scale, shift)?,
            None => config.mixture.clone(),
        };
        let denoiser: BoxedDenoiser = match (&config.denoiser, dc) {
            (DenoiserSource::Analytic, false) => Box::new(AnalyticDenoiser::new(mixture.clone())),
            (DenoiserSource::Analytic, true) => {
                Box::new(Clipped::new(AnalyticDenoiser::new(mixture.clone()), ClipBox::unit(mixture.dim()))?)
            }
            (DenoiserSource::Checkpoint { .. }, true) => {
                return Err(config_err("denoiser", "dc certification uses the analytic denoiser on unit-box data"));
            }
            (DenoiserSource::Checkpoint { path }, false) => {
                let m = load_checkpoint(path).map_err(|e| match e {
                    NdcError::Io(io) => NdcError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
                    other => other,
                })?;
                if m.dim() != mixture.dim() || m.num_classes() != mixture.num_classes() {
                    return Err(config_err("denoiser.path", "checkpoint shape does not match the mixture"));
                }
                Box::new(m)
            }
        };
        let mut test = match &config.data.test_path {
            Some(p) => read_samples_csv(p)?,
            None => gen_dataset(&config.mixture, 0, config.data.n_test, config.seed)?.test,
        };
        if let Some(bad) = test.iter().find(|s| s.x.len() != mixture.dim() || s.label >= mixture.num_classes()) {
            return Err(config_err("data.test_path", format!("test point with dim {} / label {} does not fit", bad.x.len(), bad.label)));
        }
        if let Some((scale, shift)) = &map {
            for s in test.iter_mut() {
                for (v, b) in s.x.iter_mut().zip(shift) {
                    *v = scale * *v + b;
                }
            }
        }
        let classifier_config = config.classifier.to_config(tau);
        classifier_config.default_subset(&schedule).map_err(|e| config_err("classifier.t_prime", e))?;
        Ok(Self { config: config.clone(), mixture, schedule, classifier_config, denoiser, test, map })
    }

    /// Length unit of the radius grid: the class standard deviation in classifier coordinates.
    pub fn data_scale(&self) -> f64 {
        self.mixture.class_std()
    }

    pub fn input_sigma(&self) -> f64 {
        self.schedule.sigma(self.classifier_config.tau_index)
    }

    pub fn data_map(&self) -> Option<&(f64, Vec<f64>)> {
        self.map.as_ref()
    }

    pub fn point_seed(&self, id: u64) -> u64 {
        rng::derive_seed(self.config.seed, &[POINT, id])
    }

    pub fn classifier<D: Denoiser>(&self, denoiser: D) -> Result<DiffusionClassifier<D>> {
        DiffusionClassifier::new(denoiser, self.schedule.clone(), self.classifier_config.clone())
    }
}

/// Per-point records plus the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationRun {
    pub records: Vec<CertificationRecord>,
    pub table: ResultTable,
}

/// Certifies every test point: randomized smoothing for EPNDC/APNDC, the Lipschitz
/// certificate for DC. Points run in parallel and come back sorted by id.
pub fn run_certification(config: &ExperimentConfig) -> Result<CertificationRun> {
    let setup = Setup::new(config)?;
    let counting = CountingDenoiser::new(&*setup.denoiser);
    let classifier = setup.classifier(&counting)?;
    let timed = config.record_wall_time;
    let records = exec::try_map_indexed(setup.test.len(), |i| {
        let point = &setup.test[i];
        let seed = setup.point_seed(i as u64);
        let start = Instant::now();
        let cert = match classifier.config.variant {
            Variant::Dc => {
                let c = certify_lipschitz(&point.x, &classifier, config.lipschitz.n_samples, config.lipschitz.delta, seed)?;
                SmoothedCertificate {
                    pred: Some(c.predicted),
                    p_a_lower: c.p_a_lower,
                    radius: c.radius,
                    selection_counts: Vec::new(),
                    estimation_counts: Vec::new(),
                }
            }
            _ => smoothed_certify(&point.x, &classifier, &config.smoothing, seed)?,
        };
        let wall_ms = if timed { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        Ok::<_, NdcError>(CertificationRecord::new(i as u64, point.label, &cert, wall_ms))
    })?;
    let table = ResultTable::from_records(&records, &config.radius_grid, setup.data_scale(), counting.calls());
    Ok(CertificationRun { records, table })
}

/// Denoiser evaluations [`run_certification`] performs without acceleration.
pub fn expected_certification_calls(config: &ExperimentConfig) -> Result<u64> {
    let setup = Setup::new(config)?;
    let c = setup.classifier(&*setup.denoiser)?;
    let per_point = match c.config.variant {
        Variant::Dc => config.lipschitz.n_samples as u64,
        _ => (config.smoothing.n0 + config.smoothing.n) as u64,
    };
    Ok(setup.test.len() as u64 * per_point * c.evaluations_per_call())
}

/// Clean-accuracy style evaluation of the base classifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_points: usize,
    pub input_sigma: f64,
    /// Base classifier accuracy on inputs noised to `input_sigma`.
    pub accuracy: f64,
    /// Accuracy of the exact Bayes classifier on the same inputs.
    pub bayes_accuracy: f64,
    /// Fraction of inputs where the base classifier and the Bayes classifier agree.
    pub bayes_agreement: f64,
    pub evaluator_calls: u64,
}

pub fn run_eval(config: &ExperimentConfig) -> Result<EvalReport> {
    let setup = Setup::new(config)?;
    let counting = CountingDenoiser::new(&*setup.denoiser);
    let classifier = setup.classifier(&counting)?;
    let sigma = setup.input_sigma();
    let bayes = BayesClassifier { mixture: setup.mixture.clone(), sigma };
    let rows = exec::try_map_indexed(setup.test.len(), |i| {
        let p = &setup.test[i];
        let seed = setup.point_seed(i as u64);
        let noise = rng::gaussian_vec(seed, &[NOISY_INPUT], p.x.len());
        let x: Vec<f64> = p.x.iter().zip(&noise).map(|(a, e)| a + sigma * e).collect();
        let pred = classifier.predict(&x, seed)?;
        let oracle = bayes.classify(&x, seed)?;
        Ok::<_, NdcError>((pred == p.label, oracle == p.label, pred == oracle))
    })?;
    let n = rows.len().max(1) as f64;
    let frac = |f: fn(&(bool, bool, bool)) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(EvalReport {
        n_points: rows.len(),
        input_sigma: sigma,
        accuracy: frac(|r| r.0),
        bayes_accuracy: frac(|r| r.1),
        bayes_agreement: frac(|r| r.2),
        evaluator_calls: counting.calls(),
    })
}

/// Trains an MLP denoiser on a fresh training split of the configured mixture.
pub fn run_train(config: &ExperimentConfig) -> Result<(MlpDenoiser, TrainingLog)> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    let data = gen_dataset(&config.mixture, config.data.n_train, 0, config.seed)?.train;
    let m = &config.model;
    let model = MlpDenoiser::new(
        config.mixture.dim(),
        config.mixture.num_classes(),
        &m.hidden,
        m.activation,
        m.sigma_data,
        config.train.seed,
    )?;
    train_denoiser(model, &data, &schedule, &m.scheme, &config.train)
}

/// Mean ℓ₂ distance between two denoisers over `points × sigmas × classes`.
pub fn mean_denoiser_gap(a: &impl Denoiser, b: &impl Denoiser, points: &[Vec<f64>], sigmas: &[f64]) -> Result<f64> {
    let k = a.num_classes();
    let per = exec::try_map_indexed(points.len(), |i| {
        let mut total = 0.0;
        for &s in sigmas {
            for y in 0..k {
                let (u, v) = (a.denoise(&points[i], s, y)?, b.denoise(&points[i], s, y)?);
                total += u.iter().zip(&v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            }
        }
        Ok::<_, NdcError>(total)
    })?;
    Ok(per.iter().sum::<f64>() / (points.len() * sigmas.len() * k) as f64)
}

/// Regular grid with `per_axis` points per coordinate spanning each class mean ± `num_std`·s.
pub fn evaluation_grid(gm: &GaussianMixtureSpec, per_axis: usize, num_std: f64) -> Vec<Vec<f64>> {
    let d = gm.dim();
    let pad = num_std * gm.class_std();
    let lo: Vec<f64> = (0..d).map(|j| gm.means().iter().map(|m| m[j]).fold(f64::INFINITY, f64::min) - pad).collect();
    let hi: Vec<f64> = (0..d).map(|j| gm.means().iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max) + pad).collect();
    let n = per_axis.max(2);
    let total = n.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            (0..d)
                .map(|j| {
                    let i = idx % n;
                    idx /= n;
                    lo[j] + (hi[j] - lo[j]) * i as f64 / (n - 1) as f64
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub dim: usize,
    pub t_prime: usize,
    pub lipschitz_bound: f64,
    /// Largest radius over the configured `T′` sweep with `p_A = 1`, `p_B = 0`.
    pub supremum_t_prime: usize,
    pub supremum_radius: f64,
    /// Certified accuracy and mean radius of the DC Lipschitz certificate on the test points.
    pub certification: Option<ResultTable>,
}

/// Lipschitz constant, radius supremum and (for `certify_points`) DC certificates.
pub fn run_lipschitz(config: &ExperimentConfig, certify_points: bool) -> Result<LipschitzReport> {
    let mut cfg = config.clone();
    cfg.classifier.variant = Variant::Dc;
    cfg.denoiser = DenoiserSource::Analytic;
    let setup = Setup::new(&cfg)?;
    let c = setup.classifier(&*setup.denoiser)?;
    let bound =
        crate::certification::lipschitz_bound_dc(&setup.schedule, &c.subset, &c.config.scheme, setup.mixture.dim())?;
    let sweep: Vec<usize> = cfg.lipschitz.t_prime_sweep.clone();
    let (supremum_t_prime, supremum_radius) =
        dc_radius_supremum(&setup.schedule, &c.config.scheme, setup.mixture.dim(), &sweep)
            .map_err(|e| config_err("lipschitz.t_prime_sweep", e))?;
    let certification = if certify_points { Some(run_certification(&cfg)?.table) } else { None };
    Ok(LipschitzReport {
        dim: setup.mixture.dim(),
        t_prime: c.subset.len(),
        lipschitz_bound: bound,
        supremum_t_prime,
        supremum_radius,
        certification,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiftBenchReport {
    pub n_points: usize,
    pub threshold: f64,
    /// Largest per-timestep loss-gap standard deviation seen during calibration.
    pub gap_std: Option<f64>,
    pub agreement: f64,
    pub full_calls: u64,
    pub sift_calls: u64,
    pub mean_survivors: f64,
}

fn noisy_input(setup: &Setup, i: usize) -> Vec<f64> {
    let p = &setup.test[i];
    let sigma = setup.input_sigma();
    if setup.classifier_config.variant == Variant::Dc {
        return p.x.clone();
    }
    let noise = rng::gaussian_vec(setup.point_seed(i as u64), &[NOISY_INPUT], p.x.len());
    p.x.iter().zip(&noise).map(|(a, e)| a + sigma * e).collect()
}

/// Largest standard deviation, across seeds, of the per-timestep loss gap
/// `loss_y − loss_0` over calibration points, sift timesteps and classes.
pub fn calibrate_gap_std<D: Denoiser>(
    classifier: &DiffusionClassifier<D>,
    inputs: &[Vec<f64>],
    sift_timesteps: &[usize],
    seeds: usize,
    base_seed: u64,
) -> Result<f64> {
    let k = classifier.num_classes();
    let classes: Vec<usize> = (0..k).collect();
    let per_point = exec::try_map_indexed(inputs.len(), |i| {
        let mut worst = 0.0f64;
        let gaps = (0..seeds)
            .map(|s| {
                let ev = ClassifierEvaluator::new(classifier, &inputs[i], rng::derive_seed(base_seed, &[CALIBRATE, i as u64, s as u64]))?;
                sift_timesteps
                    .iter()
                    .map(|&t| ev.losses(t, &classes).map(|l| l.iter().map(|v| v - l[0]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for ti in 0..sift_timesteps.len() {
            for y in 1..k {
                let v: Vec<f64> = gaps.iter().map(|g| g[ti][y]).collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
                worst = worst.max(var.sqrt());
            }
        }
        Ok::<_, NdcError>(worst)
    })?;
    Ok(per_point.into_iter().fold(0.0, f64::max))
}

/// Sift-and-Refine against full evaluation on the test points.
pub fn run_sift_bench(config: &ExperimentConfig) -> Result<SiftBenchReport> {
    let setup = Setup::new(config)?;
    let classifier = setup.classifier(&*setup.denoiser)?;
    if !classifier.config.shared_noise {
        return Err(config_err("classifier.shared_noise", "pruning requires shared noise"));
    }
    let lower = classifier.subset.indices()[0];
    let upper = *classifier.subset.indices().last().expect("nonempty subset");
    let sift = uniform_subset_between(&setup.schedule, config.sift.sift_t_prime.min(upper - lower + 1), lower, upper)?;
    let inputs: Vec<Vec<f64>> = (0..setup.test.len()).map(|i| noisy_input(&setup, i)).collect();
    let (threshold, gap_std) = match config.sift.threshold {
        Some(t) => (t, None),
        None => {
            let m = config.sift.calibration_points.min(inputs.len());
            let std = calibrate_gap_std(&classifier, &inputs[..m], sift.indices(), config.sift.calibration_seeds.max(2), config.seed)?;
            (config.sift.std_multiple * std, Some(std))
        }
    };
    let mut sift_cfg = SiftConfig::new(sift, classifier.subset.clone(), threshold)?;
    sift_cfg.reuse_sift_losses = config.sift.reuse_sift_losses;
    let rows = exec::try_map_indexed(inputs.len(), |i| {
        let seed = setup.point_seed(i as u64);
        let full = classifier.predict(&inputs[i], seed)?;
        let ev = ClassifierEvaluator::new(&classifier, &inputs[i], seed)?;
        let out = sift_and_refine(&ev, &sift_cfg)?;
        Ok::<_, NdcError>((full == out.class, ev.calls(), out.survivors.len()))
    })?;
    let n = rows.len().max(1) as f64;
    let k = classifier.num_classes() as u64;
    Ok(SiftBenchReport {
        n_points: rows.len(),
        threshold,
        gap_std,
        agreement: rows.iter().filter(|r| r.0).count() as f64 / n,
        full_calls: rows.len() as u64 * k * classifier.subset.len() as u64,
        sift_calls: rows.iter().map(|r| r.1).sum(),
        mean_survivors: rows.iter().map(|r| r.2 as f64).sum::<f64>() / n,
    })
}
