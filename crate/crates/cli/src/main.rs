use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndc_core::classifiers::Variant;
use ndc_core::harness::{self, ExperimentConfig};
use ndc_core::NdcError;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ndc", version, about = "Noised diffusion classifiers with certified robustness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output file (directory for gen-data).
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierArg {
    Dc,
    Epndc,
    Apndc,
}

impl From<ClassifierArg> for Variant {
    fn from(c: ClassifierArg) -> Self {
        match c {
            ClassifierArg::Dc => Variant::Dc,
            ClassifierArg::Epndc => Variant::Epndc,
            ClassifierArg::Apndc => Variant::Apndc,
        }
    }
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    classifier: Option<ClassifierArg>,
    /// Smoothing noise level, which is also the classifier's input noise level.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "t-prime")]
    t_prime: Option<usize>,
    #[arg(long = "shared-noise", value_enum)]
    shared_noise: Option<Toggle>,
}

#[derive(Args)]
struct LipschitzArgs {
    #[command(flatten)]
    common: Common,
    /// Also certify the test points with the DC Lipschitz certificate.
    #[arg(long)]
    certify: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/test splits from the configured mixture as CSV.
    GenData(Common),
    /// Train an MLP denoiser and write its checkpoint.
    Train(Common),
    /// Accuracy of the base classifier on noisy test points.
    Eval(Common),
    /// Certify test points; writes per-point and aggregate CSVs.
    Certify(CertifyArgs),
    /// Lipschitz bound and DC radius supremum.
    Lipschitz(LipschitzArgs),
    /// Sift-and-Refine agreement and call counts against full evaluation.
    SiftBench(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.output {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn output_or(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| default.into())
}

fn emit_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            harness::write_json(value, p)?;
            println!("wrote {}", p.display());
        }
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = output_or(&cfg, "data");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let d = harness::gen_dataset(&cfg.mixture, cfg.data.n_train, cfg.data.n_test, cfg.seed)?;
    harness::write_samples_csv(&d.train, dir.join("train.csv"))?;
    harness::write_samples_csv(&d.test, dir.join("test.csv"))?;
    println!("wrote {} train and {} test samples to {}", d.train.len(), d.test.len(), dir.display());
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = output_or(&cfg, "model.ndc");
    let (model, log) = harness::run_train(&cfg)?;
    harness::save_checkpoint(&model, &out)?;
    let last = log.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!("trained {} epochs, final loss {}, wrote {}", log.epoch_loss.len(), harness::format_sig9(last), out.display());
    Ok(())
}

fn eval(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let report = harness::run_eval(&cfg)?;
    emit_json(&report, cfg.output.as_deref())
}

fn certify(args: &CertifyArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = args.classifier {
        cfg.classifier.variant = c.into();
    }
    if let Some(s) = args.sigma {
        cfg.smoothing.noise_sigma = s;
    }
    if let Some(n) = args.n {
        cfg.smoothing.n = n;
    }
    if let Some(n0) = args.n0 {
        cfg.smoothing.n0 = n0;
    }
    if let Some(a) = args.alpha {
        cfg.smoothing.alpha = a;
    }
    if let Some(t) = args.t_prime {
        cfg.classifier.t_prime = t;
    }
    if let Some(s) = args.shared_noise {
        cfg.classifier.shared_noise = matches!(s, Toggle::On);
    }
    cfg.validate()?;
    let out = output_or(&cfg, "certify.csv");
    let run = harness::run_certification(&cfg)?;
    harness::write_records_csv(&run.records, &out)?;
    let agg = harness::aggregate_path(&out);
    harness::write_table_csv(&run.table, &agg)?;
    let t = &run.table;
    println!("points {}  clean {}  abstain {}  calls {}", t.n_points, t.clean_accuracy, t.abstain_rate, t.evaluator_calls);
    for (m, a) in t.radius_multiples.iter().zip(&t.certified_accuracy) {
        println!("  r = {}s  certified {}", harness::format_sig9(*m), harness::format_sig9(*a));
    }
    println!("wrote {} and {}", out.display(), agg.display());
    Ok(())
}

fn lipschitz(args: &LipschitzArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let report = harness::run_lipschitz(&cfg, args.certify)?;
    emit_json(&report, cfg.output.as_deref())
}

fn sift_bench(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let report = harness::run_sift_bench(&cfg)?;
    emit_json(&report, cfg.output.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Certify(a) => certify(a),
        Command::Lipschitz(a) => lipschitz(a),
        Command::SiftBench(c) => sift_bench(c),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.downcast_ref::<NdcError>().is_some_and(NdcError::is_config_error))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
