//! `cacnet` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O
//! error, 4 patient leakage between partitions.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cacnet::agatston::{class_names, score_report, CacCategory};
use cacnet::checkpoint::ModelCheckpoint;
use cacnet::data::{
    kfold_patients, load_labeled_slices, load_labels, load_study, normalize_hu, split_patients, FoldManifest,
    SplitManifest, DEFAULT_SPLIT_FRACTIONS, LABELS_FILE,
};
use cacnet::io::{write_atomic, write_json_atomic};
use cacnet::metrics::EvaluationReport;
use cacnet::model::argmax;
use cacnet::phantom::{generate_dataset, DatasetOptions, DEFAULT_SLICE_RANGE};
use cacnet::training::{evaluate, run_cross_validation, train, write_history};
use cacnet::{build_model, Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{Overrides, RunConfig, RESOLVED_CONFIG_FILE};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";

#[derive(Parser, Debug)]
#[command(name = "cacnet", version, about = "Coronary artery calcium scoring and six-class CNN classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with known calcium scores.
    GenPhantoms(GenArgs),
    /// Agatston-score one study and print the report as JSON.
    Score(ScoreArgs),
    /// Split patients into train/validation/test, or into k folds.
    Split(SplitArgs),
    /// Train the classifier on the train/validation partitions.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test partition.
    Eval(EvalArgs),
    /// Patient-grouped k-fold cross-validation.
    Cv(CvArgs),
    /// Per-slice probabilities and a patient-level class for one study.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of patients.
    #[arg(long)]
    patients: usize,
    /// Six comma-separated category fractions summing to 1 (default uniform).
    #[arg(long, value_delimiter = ',')]
    mix: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add ribs and a vertebra outside the cardiac ROI.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true")]
    distractors: bool,
    /// Standard deviation of background noise in HU.
    #[arg(long, default_value_t = 15.0)]
    noise_std: f64,
    #[arg(long, default_value_t = DEFAULT_SLICE_RANGE.0)]
    min_slices: usize,
    #[arg(long, default_value_t = DEFAULT_SLICE_RANGE.1)]
    max_slices: usize,
    /// In-plane size of each slice in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Study directory (or its manifest.json).
    #[arg(long)]
    study: PathBuf,
    /// Restrict scoring to the cardiac ROI declared in the manifest.
    #[arg(long)]
    roi: bool,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Dataset directory containing labels.json.
    #[arg(long)]
    data: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Write a k-fold manifest instead of a three-way split.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct CommonArgs {
    /// TOML file with [train], [model] and [paths] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split manifest JSON.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Square network input size in pixels.
    #[arg(long)]
    input_size: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref())?.apply(&Overrides {
            data: self.data.clone(),
            splits: self.splits.clone(),
            out: self.out.clone(),
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            input_size: self.input_size,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate (default: <out>/model.ckpt).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    study: PathBuf,
    /// Check the checkpoint against this config's model section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Leakage(_) => 4,
        Error::Config(_) | Error::Spec(_) => 2,
        _ => 3,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn patient_ids(data: &Path) -> Result<Vec<String>> {
    Ok(load_labels(&data.join(LABELS_FILE))?.into_keys().collect())
}

fn load_split(path: &Path) -> Result<SplitManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    manifest.validate()?;
    Ok(manifest)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_atomic(&out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?.as_bytes())
}

fn gen_phantoms(args: GenArgs) -> Result<()> {
    let mix: [f64; 6] = match args.mix {
        Some(m) => m
            .try_into()
            .map_err(|m: Vec<f64>| Error::Config(format!("--mix needs 6 values, got {}", m.len())))?,
        None => [1.0 / 6.0; 6],
    };
    let options = DatasetOptions {
        include_bone_distractors: args.distractors,
        noise_std: args.noise_std,
        slice_range: (args.min_slices, args.max_slices),
        size: args.size,
    };
    let manifest = generate_dataset(args.patients, &mix, args.seed, &args.out, &options)?;
    let counts: serde_json::Map<String, serde_json::Value> = CacCategory::ALL
        .iter()
        .map(|c| (c.display_name().to_string(), manifest.counts[c.index()].into()))
        .collect();
    print_json(&counts)
}

fn score(args: ScoreArgs) -> Result<()> {
    let volume = load_study(&args.study)?;
    let roi = if args.roi {
        Some(volume.cardiac_roi.ok_or_else(|| {
            Error::Data(format!("{} declares no cardiac ROI", args.study.display()))
        })?)
    } else {
        None
    };
    print_json(&score_report(&volume, roi.as_ref())?)
}

fn split(args: SplitArgs) -> Result<()> {
    let ids = patient_ids(&args.data)?;
    if let Some(k) = args.folds {
        let manifest = FoldManifest {
            seed: args.seed,
            folds: kfold_patients(&ids, k, args.seed)?,
        };
        manifest.validate()?;
        write_json_atomic(&args.out, &manifest)?;
        return print_json(&manifest.folds.iter().map(Vec::len).collect::<Vec<_>>());
    }
    let fractions: [f64; 3] = match args.fractions {
        Some(f) => f
            .try_into()
            .map_err(|f: Vec<f64>| Error::Config(format!("--fractions needs 3 values, got {}", f.len())))?,
        None => DEFAULT_SPLIT_FRACTIONS,
    };
    let manifest = split_patients(&ids, fractions, args.seed)?;
    write_json_atomic(&args.out, &manifest)?;
    print_json(&[manifest.train.len(), manifest.validation.len(), manifest.test.len()])
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = RunConfig::require(&cfg.paths.data, "data")?;
    let splits = load_split(&RunConfig::require(&cfg.paths.splits, "splits")?)?;
    let out = RunConfig::require(&cfg.paths.out, "out")?;
    echo_config(&cfg, &out)?;
    let labels = load_labels(&data.join(LABELS_FILE))?;
    let train_set = load_labeled_slices(&data, &splits.train, &labels, cfg.input_size())?;
    let val_set = load_labeled_slices(&data, &splits.validation, &labels, cfg.input_size())?;
    log::info!("{} training slices, {} validation slices", train_set.len(), val_set.len());
    let model = build_model::<f32>(&cfg.model, cfg.train.seed)?;
    let outcome = train(model, &train_set, &val_set, &cfg.train)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    print_json(&outcome.history.last())
}

fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    write_json_atomic(&dir.join(REPORT_FILE), report)?;
    write_atomic(&dir.join(REPORT_TABLE_FILE), report.render_table().as_bytes())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = RunConfig::require(&cfg.paths.data, "data")?;
    let splits = load_split(&RunConfig::require(&cfg.paths.splits, "splits")?)?;
    let model_path = match (&args.model, &cfg.paths.out) {
        (Some(m), _) => m.clone(),
        (None, Some(out)) => out.join(CHECKPOINT_FILE),
        (None, None) => return Err(Error::Config("need --model or --out".into())),
    };
    let ckpt = ModelCheckpoint::load(&model_path)?;
    let size = ckpt.model.config().input_size.0;
    let labels = load_labels(&data.join(LABELS_FILE))?;
    let test_set = load_labeled_slices(&data, &splits.test, &labels, size)?;
    let report = evaluate(&ckpt.model, &test_set)?;
    if let Some(out) = &cfg.paths.out {
        write_report(&report, out)?;
    }
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = RunConfig::require(&cfg.paths.data, "data")?;
    let out = RunConfig::require(&cfg.paths.out, "out")?;
    echo_config(&cfg, &out)?;
    let labels = load_labels(&data.join(LABELS_FILE))?;
    let ids: Vec<String> = labels.keys().cloned().collect();
    let slices = load_labeled_slices(&data, &ids, &labels, cfg.input_size())?;
    let cv = run_cross_validation(&slices, args.folds, &cfg.model, &cfg.train)?;
    for fold in &cv.folds {
        let dir = out.join(format!("fold_{}", fold.fold));
        write_report(&fold.report, &dir)?;
        write_history(&dir.join(HISTORY_FILE), &fold.history)?;
        write_json_atomic(&dir.join("patients.json"), &fold.held_out)?;
    }
    write_report(&cv.pooled, &out)?;
    print!("{}", cv.pooled.render_table());
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    study_id: String,
    /// One probability vector per slice, in slice order.
    slices: Vec<Vec<f32>>,
    mean: Vec<f64>,
    patient_class: usize,
    patient_category: String,
    classes: Vec<String>,
}

fn predict(args: PredictArgs) -> Result<()> {
    let ckpt = match &args.config {
        Some(path) => ModelCheckpoint::load_for_config(&args.model, &RunConfig::load(Some(path))?.model)?,
        None => ModelCheckpoint::load(&args.model)?,
    };
    let volume = load_study(&args.study)?;
    let size = ckpt.model.config().input_size.0;
    let slices: Vec<Vec<f32>> = normalize_hu(&volume, size)
        .iter()
        .map(|x| ckpt.model.predict_slice(x).map(|p| p.data().to_vec()))
        .collect::<Result<_>>()?;
    let n = slices.len() as f64;
    let mean: Vec<f64> = (0..class_names().len())
        .map(|c| slices.iter().map(|p| f64::from(p[c])).sum::<f64>() / n)
        .collect();
    let patient_class = argmax(&mean);
    let prediction = Prediction {
        study_id: volume.study_id.clone(),
        slices,
        mean,
        patient_class,
        patient_category: CacCategory::ALL[patient_class].display_name().to_string(),
        classes: class_names(),
    };
    match &args.out {
        Some(path) => write_json_atomic(path, &prediction),
        None => print_json(&prediction),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantoms(a) => gen_phantoms(a),
        Command::Score(a) => score(a),
        Command::Split(a) => split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Predict(a) => predict(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
