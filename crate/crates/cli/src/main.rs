//! `rsenet`: phantom generation, grid training, ensemble prediction and
//! evaluation for LV myocardium segmentation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rsenet::data::{self, mask_file_name};
use rsenet::fuse::{self, Ensemble};
use rsenet::metrics::{self, BaNormalization};
use rsenet::phantom;
use rsenet::train::{self, EpochRecord};
use rsenet::{DatasetSplit, EnsembleSpec, Error, FusionStrategy, NetworkConfig, TrainConfig};

/// Names an optional checkpoint-format file whose stem and stage arrays
/// initialize every trained member's encoder.
const ENCODER_ENV: &str = "RSENET_PRETRAINED_ENCODER";

#[derive(Parser, Debug)]
#[command(name = "rsenet", version, about = "LV myocardium segmentation on LGE-MRI stacks")]
struct Cli {
    /// Seed for phantom generation and the dataset split.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic exams with analytic myocardium masks.
    Phantom(PhantomArgs),
    /// Train the hyperparameter grid and select the top-3 ensemble.
    Train(TrainArgs),
    /// Predict fused masks and member probability maps.
    Predict(PredictArgs),
    /// Score predicted masks against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 6)]
    slices: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the epoch count of every grid entry.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strategy: Option<FusionStrategy>,
    /// Restrict prediction to the exams of one partition of a saved split.
    #[arg(long, requires = "partition")]
    split: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "validation", "test"], requires = "split")]
    partition: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pair-mean")]
    ba_normalization: BaMode,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum BaMode {
    PairMean,
    Reference,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// Training run description; every field is optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    network: NetworkConfig,
    /// Explicit grid; the standard lr x seed grid is used when absent.
    grid: Option<Vec<TrainConfig>>,
    /// Epochs of the standard grid.
    epochs: Option<usize>,
    split: SplitConfig,
    ensemble: FusionConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitConfig {
    train: f64,
    validation: f64,
    seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.7,
            validation: 0.15,
            seed: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FusionConfig {
    strategy: FusionStrategy,
    threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::Majority,
            threshold: fuse::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionIndex {
    exams: Vec<String>,
    strategy: FusionStrategy,
    threshold: f64,
    members: Vec<PathBuf>,
}

const PREDICTION_INDEX: &str = "predictions.json";

/// A failed command: exit 2 for usage or validation problems, 3 for runtime
/// and numerical failures.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: anyhow::Error) -> Failure {
    Failure { code: 3, error }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format { .. }
        | Error::Consistency(_)
        | Error::Bounds { .. }
        | Error::InsufficientData(_)
        | Error::Config(_)
        | Error::Shape(_)
        | Error::Precondition(_) => 2,
        Error::Io { .. } | Error::Divergence { .. } | Error::Degenerate(_) | Error::Dependency { .. } => 3,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            error: e.into(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if !path.is_dir() {
        return Err(usage(anyhow!("{what} directory {} does not exist", path.display())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path)
        .with_context(|| format!("cannot create output directory {}", path.display()))
        .map_err(runtime)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn cmd_phantom(args: &PhantomArgs, seed: u64) -> CmdResult {
    if args.count == 0 {
        return Err(usage(anyhow!("--count must be at least 1")));
    }
    if args.slices == 0 {
        return Err(usage(anyhow!("--slices must be at least 1")));
    }
    let (h, w) = args.size;
    if h < data::MIN_SLICE_EDGE || w < data::MIN_SLICE_EDGE {
        return Err(usage(anyhow!("--size {h}x{w}: both edges must be at least {}", data::MIN_SLICE_EDGE)));
    }
    let exams = phantom::generate_phantom_set(args.count, seed, args.size, args.slices)?;
    let manifest = data::save_exam_set(&exams, &args.out).map_err(|e| runtime(e.into()))?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_run_config(path: &Path) -> CmdResult<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(usage)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        usage(anyhow!("{}: invalid config at `{field}`: {}", path.display(), e.into_inner()))
    })
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>, quiet: bool) -> CmdResult {
    let cfg = load_run_config(&args.config)?;
    let data_dir = args
        .data
        .clone()
        .or(cfg.data.clone())
        .ok_or_else(|| usage(anyhow!("no data directory given (--data or config `data`)")))?;
    let out = args
        .out
        .clone()
        .or(cfg.out.clone())
        .ok_or_else(|| usage(anyhow!("no output directory given (--out or config `out`)")))?;
    require_dir(&data_dir, "data")?;
    let encoder = std::env::var_os(ENCODER_ENV).map(PathBuf::from);
    if let Some(path) = &encoder {
        if !path.is_file() {
            return Err(usage(anyhow!("{ENCODER_ENV} names {}, which does not exist", path.display())));
        }
    }

    let grid_source = if cfg.grid.is_some() { "config" } else { "default" };
    let mut grid = cfg
        .grid
        .clone()
        .unwrap_or_else(|| train::default_grid(cfg.epochs.unwrap_or(TrainConfig::default().epochs)));
    if let Some(epochs) = args.epochs {
        grid.iter_mut().for_each(|g| g.epochs = epochs);
    }
    let fusion = EnsembleSpec {
        members: vec![PathBuf::new(); train::ENSEMBLE_SIZE],
        strategy: cfg.ensemble.strategy,
        threshold: cfg.ensemble.threshold,
    };
    fusion.validate()?;
    cfg.network.validate()?;

    let exams = data::load_exam_set(&data_dir)?;
    let split_seed = seed.or(cfg.split.seed).unwrap_or(0);
    let split = data::split_dataset(&exams, (cfg.split.train, cfg.split.validation), split_seed)?;
    create_dir(&out)?;
    write_text(&out.join("split.json"), &(serde_json::to_string_pretty(&split).expect("split serializes") + "\n"))?;

    let meta = serde_json::json!({
        "grid_source": grid_source,
        "label": if grid_source == "default" {
            "stand-in grid: learning rates {1e-4, 2e-4, 5e-4} x seeds {0, 1}, batch size 12"
        } else {
            "grid given in the run config"
        },
        "runs": grid.len(),
        "split_seed": split_seed,
        "encoder": encoder.as_ref().map(|p| p.display().to_string()),
    });
    write_text(&out.join("grid_meta.json"), &(serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"))?;

    let result = train::run_grid_with_encoder(&grid, &cfg.network, encoder.as_deref(), &split, &exams, &out, |run, r: &EpochRecord| {
        if !quiet {
            eprintln!(
                "{run} epoch {:>4} loss {:.5} val_dice {:.4} ({:.1}s)",
                r.epoch, r.train_loss, r.val_dice, r.seconds
            );
        }
    })?;

    let members = result
        .ensemble_members()
        .iter()
        .map(|r| r.checkpoint_path.strip_prefix(&out).map(Path::to_path_buf).unwrap_or_else(|_| r.checkpoint_path.clone()))
        .collect();
    let spec = EnsembleSpec { members, ..fusion };
    let spec_path = out.join("ensemble.json");
    spec.save(&spec_path)?;
    if !quiet {
        for r in result.ensemble_members() {
            eprintln!("member {} best_val_dice {:.4}", r.run_id, r.best_val_dice);
        }
    }
    println!("{}", spec_path.display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs, quiet: bool) -> CmdResult {
    if !args.ensemble.is_file() {
        return Err(usage(anyhow!("ensemble file {} does not exist", args.ensemble.display())));
    }
    require_dir(&args.data, "data")?;
    let mut spec = EnsembleSpec::load(&args.ensemble)?;
    if let Some(s) = args.strategy {
        spec.strategy = s;
        spec.validate()?;
    }
    let ensemble = Ensemble::load(&spec)?;

    let mut exams = data::load_exam_set(&args.data)?;
    if let (Some(split_path), Some(part)) = (&args.split, &args.partition) {
        let text = fs::read_to_string(split_path)
            .with_context(|| format!("cannot read split {}", split_path.display()))
            .map_err(usage)?;
        let split: DatasetSplit = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a dataset split", split_path.display()))
            .map_err(usage)?;
        let refs = match part.as_str() {
            "train" => &split.train,
            "validation" => &split.validation,
            _ => &split.test,
        };
        let keep: BTreeSet<String> = DatasetSplit::exam_ids(refs).into_iter().collect();
        exams.retain(|e| keep.contains(&e.id));
    }

    create_dir(&args.out)?;
    for exam in &exams {
        let dir = args.out.join(&exam.id);
        create_dir(&dir)?;
        let norm = exam.normalized();
        for i in 0..exam.len() {
            let stack = data::stack_25d(&norm, i)?;
            let probs = ensemble.member_probabilities(&stack)?;
            for (m, p) in probs.iter().enumerate() {
                data::write_probability_map(&dir.join(format!("prob_m{m}_{i:03}.pgm")), p)?;
            }
            let mask = fuse::fuse_probabilities(&probs, spec.strategy, spec.threshold)?;
            data::write_mask(&dir.join(mask_file_name(i)), &mask)?;
        }
        if !quiet {
            eprintln!("predicted {} ({} slices)", exam.id, exam.len());
        }
    }
    let index = PredictionIndex {
        exams: exams.iter().map(|e| e.id.clone()).collect(),
        strategy: spec.strategy,
        threshold: spec.threshold,
        members: spec.members.clone(),
    };
    let index_path = args.out.join(PREDICTION_INDEX);
    write_text(&index_path, &(serde_json::to_string_pretty(&index).expect("index serializes") + "\n"))?;
    println!("{}", index_path.display());
    Ok(())
}

/// Exam ids with predictions under `pred`: the prediction index when present,
/// otherwise every subdirectory holding a mask.
fn predicted_exam_ids(pred: &Path) -> CmdResult<Vec<String>> {
    let index_path = pred.join(PREDICTION_INDEX);
    if index_path.is_file() {
        let text = fs::read_to_string(&index_path)
            .with_context(|| format!("cannot read {}", index_path.display()))
            .map_err(runtime)?;
        let index: PredictionIndex = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a prediction index", index_path.display()))
            .map_err(usage)?;
        return Ok(index.exams);
    }
    let entries = fs::read_dir(pred)
        .with_context(|| format!("cannot list {}", pred.display()))
        .map_err(runtime)?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| runtime(e.into()))?.path();
        if path.join(mask_file_name(0)).is_file() {
            if let Some(name) = path.file_name() {
                ids.push(name.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn cmd_evaluate(args: &EvaluateArgs) -> CmdResult {
    require_dir(&args.pred, "prediction")?;
    require_dir(&args.reference, "reference")?;
    let references = data::load_exam_set(&args.reference)?;
    let ids = predicted_exam_ids(&args.pred)?;
    if ids.is_empty() {
        return Err(usage(anyhow!("no predicted exams found under {}", args.pred.display())));
    }

    let mut problems = Vec::new();
    let mut exams = Vec::new();
    for id in &ids {
        match references.iter().find(|e| &e.id == id) {
            None => problems.push(format!("{id}: no reference exam")),
            Some(e) if e.masks.is_none() => problems.push(format!("{id}: reference exam has no masks")),
            Some(e) => {
                for i in 0..e.len() {
                    let p = args.pred.join(id).join(mask_file_name(i));
                    if !p.is_file() {
                        problems.push(format!("{id}: missing {}", p.display()));
                    }
                }
                exams.push(e.clone());
            }
        }
    }
    if !problems.is_empty() {
        return Err(usage(anyhow!("predictions do not align with references:\n  {}", problems.join("\n  "))));
    }

    let mut preds = Vec::with_capacity(exams.len());
    let mut refs = Vec::with_capacity(exams.len());
    for e in &mut exams {
        let masks = (0..e.len())
            .map(|i| data::read_mask(&args.pred.join(&e.id).join(mask_file_name(i)), &e.id, i))
            .collect::<rsenet::Result<Vec<_>>>()?;
        preds.push(masks);
        refs.push(e.masks.take().expect("checked above"));
    }
    let norm = match args.ba_normalization {
        BaMode::PairMean => BaNormalization::PairMean,
        BaMode::Reference => BaNormalization::Reference,
    };
    let report = metrics::evaluate_exam_set_with(&preds, &refs, &exams, norm)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("report.csv"), &report.to_csv())?;
    write_text(&args.out.join("slices.csv"), &report.slices_csv())?;
    println!("{}", metrics::format_row(&report.overall));
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, cli.seed, cli.quiet),
        Command::Predict(a) => cmd_predict(a, cli.quiet),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
