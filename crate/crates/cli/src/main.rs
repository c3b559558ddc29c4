//! `adnet`: split a dataset, inspect the model, check gradients, train,
//! evaluate and predict.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adnet_core::data::{self, Fraction, ImageSet, Manifest, Split};
use adnet_core::gradcheck::{self, GradcheckOptions};
use adnet_core::metrics::{self, MetricsReport};
use adnet_core::model::{build_graph, graph_param_count, render_summary, summarize, FilterScale, ModelConfig};
use adnet_core::train::{self, RunConfig, TrainData};
use adnet_core::{exec, weights, DType, Error, Exec, Result, Scalar};

use config::ConfigFile;

#[derive(Parser)]
#[command(name = "adnet", version, about = "Three-branch CNN for three-class dementia staging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a stratified train/test manifest for a class-per-directory dataset.
    Split(SplitArgs),
    /// Print the layer table and parameter totals.
    Summary(SummaryArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train from a manifest; writes weights and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate weights on one split of a manifest.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SummaryArgs {
    #[arg(long, default_value = "1")]
    filter_scale: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only entries whose name contains this text.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random cases per entry.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, hide = true)]
    perturb: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output weights file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Single-threaded kernels.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    filter_scale: Option<String>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    /// Add a test-split row to the metrics after every epoch.
    #[arg(long)]
    eval_each_epoch: bool,
    /// Hold out this share of the training split for validation.
    #[arg(long)]
    val_fraction: Option<String>,
    /// Store Adam state alongside the weights.
    #[arg(long)]
    checkpoint: bool,
    /// Resample images that are not 100x100 instead of rejecting them.
    #[arg(long)]
    resize: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Confusion matrix CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
    /// Metrics CSV (one row).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value = "1")]
    filter_scale: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    resize: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Take class names from this manifest instead of the canonical table.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "1")]
    filter_scale: String,
    #[arg(long)]
    resize: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("ADNET_THREADS").ok().and_then(|v| v.parse().ok()) {
        exec::configure_threads(n);
    }
    let outcome = match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Summary(a) => cmd_summary(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn cmd_split(a: SplitArgs) -> Result<ExitCode> {
    let cfg = ConfigFile::load(a.config.as_deref(), &["data", "fraction", "seed", "out"])?;
    let dir: PathBuf = cfg.require(a.data, "data")?;
    let fraction: Fraction = cfg.require::<String>(a.fraction, "fraction")?.parse()?;
    let seed: u64 = cfg.require(a.seed, "seed")?;
    let out: PathBuf = cfg.require(a.out, "out")?;

    let scanned = data::scan_dataset(&dir)?;
    for s in &scanned.skipped {
        eprintln!("note: skipping class directory {s:?}");
    }
    let manifest = data::stratified_split(&scanned.items, &scanned.classes, fraction, seed)?;
    manifest.write(&out)?;
    println!("{:<20} {:>7} {:>7}", "class", "train", "test");
    let counts = manifest.counts();
    for (name, (tr, te)) in scanned.classes.names().iter().zip(&counts) {
        println!("{name:<20} {tr:>7} {te:>7}");
    }
    let (tr, te) = counts.iter().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    println!("{:<20} {tr:>7} {te:>7}", "total");
    Ok(ExitCode::SUCCESS)
}

fn cmd_summary(a: SummaryArgs) -> Result<ExitCode> {
    let cfg = ModelConfig::scaled(a.filter_scale.parse()?);
    let graph = build_graph(&cfg)?;
    let rows = summarize(&graph, 1)?;
    print!("{}", render_summary(&rows, &graph_param_count(&graph)?));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report = gradcheck::run(&GradcheckOptions {
        seed: a.seed,
        seeds: a.seeds,
        filter: a.op,
        perturb: a.perturb,
        ..Default::default()
    })?;
    print!("{report}");
    if report.passed() {
        println!("all gradient checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error[gradcheck]: tolerance exceeded in {}", report.failures().join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn parse_precision(bits: u32) -> Result<DType> {
    match bits {
        32 => Ok(DType::F32),
        64 => Ok(DType::F64),
        other => Err(Error::Config(format!("precision must be 32 or 64, got {other}"))),
    }
}

const TRAIN_KEYS: &[&str] = &[
    "manifest",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "out",
    "metrics",
    "deterministic",
    "filter_scale",
    "precision",
    "eval_each_epoch",
    "val_fraction",
    "checkpoint",
    "resize",
];

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = ConfigFile::load(a.config.as_deref(), TRAIN_KEYS)?;
    let defaults = RunConfig::default();
    let run = RunConfig {
        epochs: cfg.get(a.epochs, "epochs")?.unwrap_or(defaults.epochs),
        batch_size: cfg.get(a.batch_size, "batch_size")?.unwrap_or(defaults.batch_size),
        learning_rate: cfg.get(a.lr, "lr")?.unwrap_or(defaults.learning_rate),
        seed: cfg.get(a.seed, "seed")?.unwrap_or(defaults.seed),
        filter_scale: match cfg.get::<String>(a.filter_scale, "filter_scale")? {
            Some(s) => s.parse()?,
            None => FilterScale::ONE,
        },
        precision: match cfg.get(a.precision, "precision")? {
            Some(bits) => parse_precision(bits)?,
            None => defaults.precision,
        },
        deterministic: cfg.switch(a.deterministic, "deterministic")?,
        eval_each_epoch: cfg.switch(a.eval_each_epoch, "eval_each_epoch")?,
        val_fraction: match cfg.get::<String>(a.val_fraction, "val_fraction")? {
            Some(s) => Some(s.parse()?),
            None => None,
        },
        checkpoint: cfg.switch(a.checkpoint, "checkpoint")?,
    };
    run.validate()?;
    run.model_config().validate()?;
    let manifest_path: PathBuf = cfg.require(a.manifest, "manifest")?;
    let out: PathBuf = cfg.require(a.out, "out")?;
    let metrics_path: PathBuf = cfg.require(a.metrics, "metrics")?;
    let resize = cfg.switch(a.resize, "resize")?;

    let mut manifest = Manifest::read(&manifest_path)?;
    if let Some(f) = run.val_fraction {
        manifest.carve_validation(f, run.seed)?;
    }
    let exec = run.exec();
    let train_set = ImageSet::load(&manifest, Split::Train, resize, exec)?;
    let val_set = match run.val_fraction {
        Some(_) => Some(ImageSet::load(&manifest, Split::Val, resize, exec)?),
        None => None,
    };
    let test_set = match run.eval_each_epoch {
        true => Some(ImageSet::load(&manifest, Split::Test, resize, exec)?),
        false => None,
    };
    let data = TrainData {
        train: &train_set,
        val: val_set.as_ref(),
        test: test_set.as_ref(),
        class_names: manifest.classes.names().to_vec(),
    };
    eprintln!(
        "training {} images, {} epochs, batch {}, lr {}, scale {}, {}",
        train_set.len(),
        run.epochs,
        run.batch_size,
        run.learning_rate,
        run.filter_scale,
        run.precision
    );
    let progress = |epoch: usize, rows: &[(String, MetricsReport)]| {
        let parts: Vec<String> = rows
            .iter()
            .map(|(s, r)| format!("{s} loss {:.4} acc {}", r.mean_loss, metrics::format_metric(r.accuracy)))
            .collect();
        println!("epoch {epoch}/{}  {}", run.epochs, parts.join("  "));
    };
    match run.precision {
        DType::F32 => {
            train::train::<f32>(&run, &data, &out, &metrics_path, progress)?;
        }
        DType::F64 => {
            train::train::<f64>(&run, &data, &out, &metrics_path, progress)?;
        }
    }
    println!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let split: Split = a.split.parse()?;
    let model = ModelConfig::scaled(a.filter_scale.parse()?);
    let manifest = Manifest::read(&a.manifest)?;
    let exec = Exec::from_deterministic(a.deterministic);
    let header = weights::peek(&a.weights)?;
    let report = match header.dtype {
        DType::F32 => eval_as::<f32>(&a, &model, &manifest, split, exec)?,
        DType::F64 => eval_as::<f64>(&a, &model, &manifest, split, exec)?,
    };
    print!("{}", metrics::render_report(&report));
    if let Some(p) = &a.confusion {
        report.confusion.write_csv(p)?;
    }
    if let Some(p) = &a.metrics {
        let text = format!(
            "{}\n{}\n",
            metrics::metrics_header(manifest.classes.names()),
            metrics::metrics_row(0, split.as_str(), &report)
        );
        std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    println!("accuracy {}", metrics::format_metric(report.accuracy));
    Ok(ExitCode::SUCCESS)
}

fn eval_as<T: Scalar>(a: &EvalArgs, model: &ModelConfig, manifest: &Manifest, split: Split, exec: Exec) -> Result<MetricsReport> {
    let (params, _) = weights::load::<T>(&a.weights, Some(&model.fingerprint()))?;
    let graph = build_graph(model)?;
    graph.check_params(&params)?;
    let set = ImageSet::load(manifest, split, a.resize, exec)?;
    if set.is_empty() {
        return Err(Error::Data(format!("manifest has no {split} entries")));
    }
    Ok(train::evaluate(&graph, &params, &set, a.batch_size, manifest.classes.names(), exec)?.0)
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let model = ModelConfig::scaled(a.filter_scale.parse()?);
    let header = weights::peek(&a.weights)?;
    let probs = match header.dtype {
        DType::F32 => predict_as::<f32>(&a.weights, &a.image, a.resize, &model)?,
        DType::F64 => predict_as::<f64>(&a.weights, &a.image, a.resize, &model)?,
    };
    let names = match &a.manifest {
        Some(p) => Manifest::read(p)?.classes,
        None => data::ClassTable::canonical(),
    };
    if names.len() != probs.len() {
        return Err(Error::Config(format!(
            "manifest lists {} classes but the model predicts {}",
            names.len(),
            probs.len()
        )));
    }
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        println!("{:<20} {p:.6}", names.name(i).unwrap_or("?"));
        if *p > probs[best] {
            best = i;
        }
    }
    println!("prediction {}", names.name(best).unwrap_or("?"));
    Ok(ExitCode::SUCCESS)
}

fn predict_as<T: Scalar>(weights_path: &Path, image: &Path, resize: bool, model: &ModelConfig) -> Result<Vec<f64>> {
    let (params, _) = weights::load::<T>(weights_path, Some(&model.fingerprint()))?;
    let graph = build_graph(model)?;
    graph.check_params(&params)?;
    let x = data::load_image::<T>(image, resize)?;
    train::predict(&graph, &params, &x, Exec::Sequential)
}
