//! Command-line front end: data generation, training, evaluation,
//! attention-map export and gradient checking.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::catalog::{load_catalog, synthetic_catalog, AttributeCatalog, CatalogError};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::data::{load_data_dir, write_data_dir, DataError};
use crate::eval::{evaluate, EvalError, EvalMode, EvalOptions, Prediction, RankScope};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::image::{gray_pgm, Image, ImageError};
use crate::model::PoarModel;
use crate::synth::{generate_dataset, SynthError, SyntheticSpec};
use crate::tensor::TensorError;
use crate::train::{loss_and_grads, loss_value, train, Samples, TrainError};
use crate::vision::{attention_maps, VisionError};

pub const EXIT_GENERIC: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("report contains NaN metrics")]
    NanMetric,
    #[error("gradient check failed: max relative error {0:.3e}")]
    GradCheck(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_)
            | Self::Config(_)
            | Self::Catalog(_)
            | Self::Data(_)
            | Self::Synth(_)
            | Self::Image(_)
            | Self::Train(TrainError::EmptyDataset | TrainError::HeldOutLabel { .. }) => EXIT_VALIDATION,
            Self::Train(TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. }) => EXIT_DIVERGED,
            Self::Checkpoint(CheckpointError::Compatibility(_)) => EXIT_INCOMPATIBLE,
            Self::Checkpoint(CheckpointError::Format(_)) => EXIT_VALIDATION,
            Self::GradCheck(_) => EXIT_GRADCHECK,
            _ => EXIT_GENERIC,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "poar", version, about = "Pedestrian open-attribute recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Export per-token attention maps for one image.
    Attnmap(AttnmapArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training samples.
    #[arg(long)]
    pub n: usize,
    /// Test samples; defaults to a quarter of `--n`.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated `Group:value` attributes kept out of training.
    #[arg(long, default_value = "")]
    pub holdout: String,
    /// Catalog JSONL; the built-in synthetic catalog when omitted.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Standard deviation of per-pixel noise.
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "i2t")]
    pub mode: EvalMode,
    /// JSON report path; the CSV goes next to it with a `.csv` extension.
    #[arg(long)]
    pub report: PathBuf,
    /// Rank each group token against every prompt instead of its group's.
    #[arg(long)]
    pub all_prompts: bool,
    /// Predict every prompt at or above this cosine similarity instead of
    /// the best one per group.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Allow a dataset whose catalog differs from the training catalog;
    /// groups are matched by key.
    #[arg(long)]
    pub transfer: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PPM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Config file; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples in the checked batch.
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 6)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    /// Perturb one analytic gradient to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, A: Serialize> {
    pub subcommand: &'a str,
    pub version: &'a str,
    pub args: &'a A,
    pub config: Option<&'a TrainConfig>,
    pub seed: Option<u64>,
}

fn write_manifest<A: Serialize>(
    path: &Path,
    subcommand: &str,
    args: &A,
    config: Option<&TrainConfig>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let m = RunManifest {
        subcommand,
        version: env!("CARGO_PKG_VERSION"),
        args,
        config,
        seed,
    };
    fs::write(path, serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n")?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Evaluation threads: `POAR_THREADS` if set, else the available cores.
pub fn eval_threads() -> usize {
    std::env::var("POAR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Attnmap(a) => cmd_attnmap(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let base = match &args.catalog {
        Some(p) => load_catalog(p)?,
        None => synthetic_catalog(),
    };
    let holdout: Vec<&str> = args.holdout.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let catalog = base.with_holdout_labels(&holdout)?;
    let spec = SyntheticSpec::for_catalog(&catalog, args.height, args.width, args.noise)?;
    let n_test = args.n_test.unwrap_or(args.n / 4);
    let dataset = generate_dataset(&spec, &catalog, args.n, n_test, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    write_data_dir(&args.out, &catalog, &dataset)?;
    write_manifest(&args.out.join(RUN_MANIFEST), "gen-data", args, None, Some(args.seed))?;
    println!(
        "wrote {} train and {} test samples to {}",
        args.n,
        n_test,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let (_, config) = TrainConfig::load(&args.config)?;
    let data = load_data_dir(&args.data)?;
    let test = Samples {
        images: &data.test.images,
        labels: &data.test.labels,
    };
    let result = train(
        &config,
        &data.catalog,
        Samples {
            images: &data.train.images,
            labels: &data.train.labels,
        },
        (!data.test.is_empty()).then_some(test),
        |line| println!("{}", serde_json::to_string(line).expect("log serializes")),
    );
    write_manifest(&sibling(&args.out, ".run.json"), "train", args, Some(&config), Some(config.seed))?;
    match result {
        Ok(outcome) => {
            outcome.checkpoint.save(&args.out)?;
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            reason,
            last_good,
        }) => {
            last_good.save(&args.out)?;
            Err(TrainError::Diverged {
                epoch,
                step,
                reason,
                last_good,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let data = load_data_dir(&args.data)?;
    if !args.transfer {
        ckpt.check_catalog(&data.catalog)?;
    }
    let model = ckpt.to_model()?;
    // held-out attributes come from the dataset's split
    let model_catalog = if args.transfer {
        ckpt.catalog.clone()
    } else {
        ckpt.catalog.with_holdout(&data.catalog.unseen().into_iter().collect::<Vec<_>>())?
    };
    let options = EvalOptions {
        mode: args.mode,
        scope: if args.all_prompts {
            RankScope::AllPrompts
        } else {
            RankScope::WithinGroup
        },
        prediction: args.threshold.map_or(Prediction::Top1, Prediction::Threshold),
        threads: eval_threads(),
    };
    let report = evaluate(
        &model,
        &model_catalog,
        &data.catalog,
        &data.test.images,
        &data.test.labels,
        &options,
    )?;
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(
        &args.report,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    fs::write(args.report.with_extension("csv"), report.to_csv())?;
    write_manifest(&sibling(&args.report, ".run.json"), "eval", args, Some(&ckpt.config), None)?;
    print!("{}", report.summary_table());
    if report.has_nan() {
        return Err(CliError::NanMetric);
    }
    Ok(())
}

/// Name used in attention-map files for token `k`.
pub fn token_name(model: &PoarModel, catalog: &AttributeCatalog, k: usize) -> String {
    if model.tokens() == 1 {
        "shared".to_string()
    } else {
        catalog.group(k).key.clone()
    }
}

pub fn cmd_attnmap(args: &AttnmapArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.to_model()?;
    let image = Image::read_ppm(&args.image)?;
    model.patchify(&image)?;
    let (_, records) = model.vision.embed(&model.store, &image, &model.mask)?;
    let maps = attention_maps(&records, model.tokens())?;
    let rows = model.vision.config.grid_rows();
    let cols = model.vision.config.grid_cols();
    fs::create_dir_all(&args.out)?;
    for (layer, m) in maps.iter().enumerate() {
        for k in 0..model.tokens() {
            let name = format!("attn_{}_{layer}", token_name(&model, &ckpt.catalog, k));
            let values = m.row(k);
            let mut csv = String::new();
            for r in 0..rows {
                let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(csv, "{}", line.join(","));
            }
            fs::write(args.out.join(format!("{name}.csv")), csv)?;
            fs::write(args.out.join(format!("{name}.pgm")), gray_pgm(rows, cols, values))?;
        }
    }
    write_manifest(&args.out.join(RUN_MANIFEST), "attnmap", args, Some(&ckpt.config), None)?;
    println!("wrote {} maps to {}", maps.len() * model.tokens(), args.out.display());
    Ok(())
}

/// Finite-difference check of the full training objective on `batch`
/// synthetic samples.
pub fn gradcheck_report(
    config: &TrainConfig,
    seed: u64,
    batch: usize,
    options: &GradCheckOptions,
    inject_fault: bool,
) -> Result<GradCheckReport, CliError> {
    let catalog = synthetic_catalog();
    let spec = SyntheticSpec::for_catalog(&catalog, config.model.height, config.model.width, 0.03)?;
    let data = generate_dataset(&spec, &catalog, batch, 0, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let model = PoarModel::new(config.model, &catalog, seed)?;
    let patches = data
        .train
        .images
        .iter()
        .map(|img| model.patchify(img))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = &data.train.labels;
    let params = model.store.tensors();
    let (_, mut grads) = loss_and_grads(&model, &catalog, config, params, &patches, labels)?;
    if inject_fault {
        for v in grads[0].data_mut() {
            *v = *v * 1.5 + 1e-3;
        }
    }
    let report = grad_check(
        |p| {
            loss_value(&model, &catalog, config, p, &patches, labels).map_err(|e| match e {
                TrainError::Tensor(t) => t,
                other => TensorError::Shape {
                    op: "gradcheck loss",
                    detail: other.to_string(),
                },
            })
        },
        params,
        model.store.names(),
        &grads,
        options,
    )?;
    Ok(report)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(p) => TrainConfig::load(p)?.1,
        None => TrainConfig::desk(),
    };
    if args.batch == 0 {
        return Err(CliError::Usage("--batch must be positive".into()));
    }
    let options = GradCheckOptions {
        step: args.step,
        samples_per_param: args.samples,
        fourth_order: true,
        seed: args.seed,
    };
    let report = gradcheck_report(&config, args.seed, args.batch, &options, args.inject_fault)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::GradCheck(report.max_rel_error))
    }
}
