use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use echocal::config::{ConfigError, RunConfig};
use echocal::data::{self, load_any_image, load_manifest, split_dataset, write_manifest, DataError, Manifest, IMAGE_SIZE};
use echocal::geometry::{measurements_from_landmarks, Landmark, Measurement};
use echocal::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelError, UNet};
use echocal::pipeline::{
    self, benchmark, render_report, write_overlays, EvalReport, LabelOracle, ModelPredictor, PipelineError, Predictor,
    BEST_CHECKPOINT,
};

#[derive(Parser)]
#[command(name = "echocal", version, about = "Left-ventricle caliper landmark detection")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the phantom corpus, its manifest and split manifests.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_patients: Option<usize>,
        #[arg(long)]
        samples_per_patient: Option<f64>,
    },
    /// Train on the corpus in the data directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fit this many training samples without augmentation and report the endpoint error.
        #[arg(long, value_name = "N")]
        overfit: Option<usize>,
    },
    /// Evaluate a checkpoint on a manifest and write reports and overlays.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the labels as predictions (checks the evaluation harness).
        #[arg(long)]
        labels_as_predictions: bool,
        /// Append the intra-analyser reference row.
        #[arg(long)]
        reference_row: bool,
    },
    /// Print landmarks and lengths for one image as JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
    },
    /// Time single-image inference.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Build a comparison table from evaluation JSON files.
    Report {
        #[arg(required = true)]
        evals: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        reference_row: bool,
    },
}

/// Failure with its exit code: 2 for bad input, 1 for internal errors.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::user(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Image { .. } | DataError::Manifest { .. } | DataError::Split(_) => Failure::user(e.to_string()),
            _ => Failure::internal(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint { .. } | ModelError::CheckpointVersion { .. } | ModelError::Io { .. } | ModelError::Config(_) => {
                Failure::user(e.to_string())
            }
            _ => Failure::internal(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(d) => d.into(),
            PipelineError::Model(m) => m.into(),
            PipelineError::Config(_) => Failure::user(e.to_string()),
            _ => Failure::internal(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::internal(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::user(format!("{what} not found: {}", path.display())))
    }
}

fn check_device() -> Result<(), Failure> {
    match std::env::var("ECHOCAL_DEVICE") {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => {
            Err(Failure::user(format!("ECHOCAL_DEVICE={d} is not supported; only \"cpu\" is available")))
        }
        _ => Ok(()),
    }
}

fn load_model(path: &Path) -> Result<(UNet<f32>, CheckpointMeta), Failure> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn cmd_generate(
    mut cfg: RunConfig,
    out: Option<PathBuf>,
    seed: Option<u64>,
    n_patients: Option<usize>,
    spp: Option<f64>,
) -> Result<(), Failure> {
    if let Some(s) = seed {
        cfg.seed = Some(s);
        cfg.resolve_seed();
    }
    if let Some(n) = n_patients {
        cfg.corpus.n_patients = n;
    }
    if let Some(s) = spp {
        cfg.corpus.samples_per_patient = s;
    }
    let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
    cfg.paths.data_dir = out.clone();
    let manifest = data::generate_corpus(&cfg.corpus, &out).map_err(|e| match e {
        DataError::Phantom(m) => Failure::user(format!("invalid phantom parameters: {m}")),
        e => e.into(),
    })?;
    let splits = split_dataset(&manifest, &cfg.split)?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_manifest(&out.join(format!("{name}.jsonl")), part)?;
    }
    cfg.write_snapshot(&out).map_err(|e| io_failure(&out, e))?;
    println!(
        "{} samples from {} patients written to {} (train {}, val {}, test {})",
        manifest.len(),
        manifest.patients().len(),
        out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn cmd_train(
    mut cfg: RunConfig,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
    overfit: Option<usize>,
) -> Result<(), Failure> {
    if let Some(s) = seed {
        cfg.seed = Some(s);
        cfg.resolve_seed();
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let data_dir = data_dir.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let out = out.unwrap_or_else(|| cfg.paths.run_dir.clone());
    cfg.paths.data_dir = data_dir.clone();
    cfg.paths.run_dir = out.clone();
    cfg.validate()?;
    let manifest_path = data_dir.join("manifest.jsonl");
    require_file(&manifest_path, "manifest")?;
    let manifest = load_manifest(&manifest_path)?;
    let splits = split_dataset(&manifest, &cfg.split)?;
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_manifest(&out.join(format!("{name}.jsonl")), part)?;
    }
    cfg.write_snapshot(&out).map_err(|e| io_failure(&out, e))?;

    if let Some(n) = overfit {
        let n = n.min(splits.train.len());
        let samples = (0..n).map(|i| splits.train.load_sample(i)).collect::<Result<Vec<_>, _>>()?;
        let max_epochs = epochs.unwrap_or(500);
        let outcome = pipeline::overfit(&cfg.train, &samples, max_epochs, 2.0, 10)?;
        let (error, epochs_run) = (outcome.final_error(), outcome.epochs_run);
        let mut net = outcome.model;
        let meta = CheckpointMeta {
            model: net.config().clone(),
            train_config_hash: cfg.train.hash(),
            epoch: Some(epochs_run),
            val_loss: None,
        };
        save_checkpoint(&out.join("overfit.ckpt"), &mut net, &meta)?;
        println!(
            "overfit on {n} samples: mean endpoint error {error:.3} px after {epochs_run} epochs"
        );
        return Ok(());
    }

    let train = splits.train.load_all()?;
    let val = splits.val.load_all()?;
    log::info!("training on {} samples, validating on {}", train.len(), val.len());
    let outcome = pipeline::train(&cfg.train, &train, &val, &out)?;
    println!(
        "trained {} epochs; best epoch {} (loss {:.5}); checkpoint {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_loss,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    labels: bool,
    reference_row: bool,
) -> Result<(), Failure> {
    let run_dir = cfg.paths.run_dir.clone();
    let manifest_path = manifest.unwrap_or_else(|| run_dir.join("test.jsonl"));
    let out = out.unwrap_or_else(|| run_dir.clone());
    require_file(&manifest_path, "manifest")?;
    let manifest: Manifest = load_manifest(&manifest_path)?;
    let mut predictor: Box<dyn Predictor> = if labels {
        Box::new(LabelOracle)
    } else {
        let path = checkpoint.unwrap_or_else(|| run_dir.join(BEST_CHECKPOINT));
        let (net, _) = load_model(&path)?;
        Box::new(ModelPredictor::new(net, "echocal")?)
    };
    let report = pipeline::evaluate(predictor.as_mut(), &manifest)?;
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    write_json(&out.join("eval.json"), &report)?;
    let table = render_report(std::slice::from_ref(&report), reference_row || cfg.eval.reference_row)?;
    let text = table.to_text();
    std::fs::write(out.join("report.txt"), &text).map_err(|e| io_failure(&out, e))?;
    write_json(&out.join("report.json"), &table)?;
    let overlays = write_overlays(&report, &manifest, &out)?;
    print!("{text}");
    if !report.missing.is_empty() {
        println!("missing images excluded: {}", report.missing.join(", "));
    }
    println!("{} overlays written to {}", overlays.len(), out.display());
    Ok(())
}

fn cmd_infer(checkpoint: &Path, image: &Path) -> Result<(), Failure> {
    let (net, _) = load_model(checkpoint)?;
    require_file(image, "image")?;
    let img = load_any_image(image, IMAGE_SIZE).map_err(|e| Failure::user(e.to_string()))?;
    let mut predictor = ModelPredictor::new(net, "echocal")?;
    let lm = predictor.predict_image(&img)?;
    let ms = measurements_from_landmarks(&lm);
    let landmarks: Vec<_> = Landmark::ALL
        .iter()
        .map(|&l| json!({ "name": l.name(), "x": lm.get(l).x, "y": lm.get(l).y }))
        .collect();
    let mut lengths = serde_json::Map::new();
    for m in Measurement::ALL {
        lengths.insert(m.name().to_string(), json!(ms.get(m).length));
    }
    let out = json!({ "image": image.display().to_string(), "landmarks": landmarks, "lengths": lengths });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn cmd_bench(cfg: RunConfig, checkpoint: Option<PathBuf>, runs: Option<usize>) -> Result<(), Failure> {
    let mut net = match checkpoint {
        Some(p) => load_model(&p)?.0,
        None => UNet::new(cfg.train.model.clone(), cfg.train.seed)?,
    };
    let report = benchmark(&mut net, runs.unwrap_or(cfg.eval.bench_runs), cfg.eval.bench_warmup)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn cmd_report(cfg: RunConfig, evals: &[PathBuf], out: Option<PathBuf>, reference_row: bool) -> Result<(), Failure> {
    let mut reports = Vec::with_capacity(evals.len());
    for p in evals {
        require_file(p, "evaluation report")?;
        let text = std::fs::read_to_string(p).map_err(|e| Failure::user(format!("{}: {e}", p.display())))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Failure::user(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let table = render_report(&reports, reference_row || cfg.eval.reference_row)?;
    let text = table.to_text();
    if let Some(out) = out {
        std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
        std::fs::write(out.join("report.txt"), &text).map_err(|e| io_failure(&out, e))?;
        write_json(&out.join("report.json"), &table)?;
    }
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    check_device()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Generate { out, seed, n_patients, samples_per_patient } => cmd_generate(cfg, out, seed, n_patients, samples_per_patient),
        Command::Train { data, out, epochs, seed, overfit } => cmd_train(cfg, data, out, epochs, seed, overfit),
        Command::Eval { checkpoint, manifest, out, labels_as_predictions, reference_row } => {
            cmd_eval(cfg, checkpoint, manifest, out, labels_as_predictions, reference_row)
        }
        Command::Infer { checkpoint, image } => cmd_infer(&checkpoint, &image),
        Command::Bench { checkpoint, runs } => cmd_bench(cfg, checkpoint, runs),
        Command::Report { evals, out, reference_row } => cmd_report(cfg, &evals, out, reference_row),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
