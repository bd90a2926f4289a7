//! The `qsr` command line: dataset generation, training, evaluation,
//! ablation grids and latent-class visualization.
//!
//! Every command writes a `run.json` manifest next to its outputs. Exit
//! codes are 0 on success, 1 on runtime failure and 2 on usage or
//! validation errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data_synth::{
    generate_dataset, load_dataset, make_fold_split, save_dataset, save_mask_png, ClassCatalog, Dataset, FoldSplit,
    SceneParams,
};
use crate::error::QsrError;
use crate::evaluation::{
    eval_seed, evaluate_episodes, latent_visualization, sample_eval_episodes, AblationGrid, EvalReport, EvalSettings,
    Experiment, FoldReport, FprMode,
};
use crate::model::FssModel;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::training::{train_run, TrainConfig};

pub const RUN_MANIFEST: &str = "run.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] QsrError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                QsrError::Config { .. } | QsrError::MissingPath(_) | QsrError::InvalidInput(_) => 2,
                _ => 1,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "qsr", version, about = "Few-shot segmentation with query semantic reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with its fold file.
    GenData(GenDataArgs),
    /// Train on one fold and write checkpoints, the loss log and a report.
    Train(TrainArgs),
    /// Evaluate an inference checkpoint on a fold's test classes.
    Eval(EvalArgs),
    /// Cross-validate every point of an ablation grid.
    Ablate(AblateArgs),
    /// Write latent-class and background masks for one episode.
    Viz(VizArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FprArg {
    Pooled,
    PerEpisode,
}

impl From<FprArg> for FprMode {
    fn from(v: FprArg) -> Self {
        match v {
            FprArg::Pooled => FprMode::Pooled,
            FprArg::PerEpisode => FprMode::PerEpisode,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 4)]
    pub folds: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// `off` trains the baseline (alpha = beta = 0).
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub qsr: Switch,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation episodes on the fold's test classes after training; 0 skips.
    #[arg(long, default_value_t = 200)]
    pub eval_episodes: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the fold recorded in the checkpoint.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Config the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FprArg::Pooled)]
    pub fpr_mode: FprArg,
    /// Also write every predicted mask as a 0/255 PNG.
    #[arg(long)]
    pub save_masks: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    /// `axis=v1,v2;axis=...` over n_latent, alpha_beta, bg_source, proto_source.
    #[arg(long)]
    pub grid_spec: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Fold ids to run; all folds when omitted.
    #[arg(long, value_delimiter = ',')]
    pub folds: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VizArgs {
    /// Training checkpoint (it carries the class weights).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index into the seeded stream of training-class episodes.
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    #[arg(long, default_value_t = 3)]
    pub top_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Record of one invocation, written as `run.json` in the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub git_commit: Option<String>,
    pub out_dir: PathBuf,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

struct Run {
    command: &'static str,
    args: serde_json::Value,
    started: u64,
}

impl Run {
    fn start(command: &'static str, args: &impl Serialize) -> CliResult<Self> {
        let args = serde_json::to_value(args).map_err(QsrError::from)?;
        Ok(Self { command, args, started: now_ms() })
    }

    fn finish(self, out: &Path, config_path: Option<PathBuf>, seed: Option<u64>, config_hash: Option<String>) -> CliResult<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            config_path,
            seed,
            config_hash,
            git_commit: git_commit(),
            out_dir: out.to_path_buf(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(QsrError::from)?;
        std::fs::write(out.join(RUN_MANIFEST), text).map_err(QsrError::from)?;
        Ok(())
    }
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

fn load_data(dir: &Path) -> CliResult<(Dataset, Vec<FoldSplit>)> {
    if !dir.join("manifest.json").exists() {
        return Err(usage(format!("no dataset at {} (manifest.json not found)", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn pick_fold(folds: &[FoldSplit], id: usize) -> CliResult<&FoldSplit> {
    folds
        .iter()
        .find(|f| f.fold_id == id)
        .ok_or_else(|| usage(format!("fold {id} not in fold file (have {})", folds.len())))
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("config file {} not found", p.display())));
            }
            TrainConfig::from_file(p)?
        }
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let run = Run::start("gen-data", args)?;
    if dir_is_nonempty(&args.out) && !args.force {
        return Err(usage(format!("{} exists and is not empty; pass --force to write into it", args.out.display())));
    }
    let catalog = ClassCatalog::new(args.classes)?;
    let params = SceneParams { height: args.image_size, width: args.image_size, ..SceneParams::default() };
    let folds = make_fold_split(&catalog, args.folds)?;
    let dataset = generate_dataset(&catalog, args.images_per_class, args.seed, &params)?;
    save_dataset(&args.out, &dataset, &folds)?;
    log::info!("wrote {} pairs to {}", dataset.len(), args.out.display());
    run.finish(&args.out, None, Some(args.seed), None)
}

fn train_typed<T: Scalar>(cfg: &TrainConfig, fold: &FoldSplit, ds: &Dataset, args: &TrainArgs) -> CliResult<()> {
    let outcome = train_run::<T>(cfg, fold, ds, Some(&args.out))?;
    if args.eval_episodes > 0 {
        let settings = EvalSettings { episodes_per_fold: args.eval_episodes, k: cfg.k, fpr_mode: FprMode::Pooled };
        let report = evaluate_fold(&outcome.model, ds, fold, settings, eval_seed(cfg.seed, fold.fold_id), None)?;
        let report = EvalReport::new(cfg.seed, outcome.model.config.config_hash(), settings, vec![report]);
        report.write_json(&args.out.join(REPORT_JSON))?;
        report.write_csv(&args.out.join(REPORT_CSV))?;
        log::info!("fold {} mIoU {:?} FB-IoU {:?} FPR {:?}", fold.fold_id, report.mean_miou, report.mean_fb_iou, report.mean_fpr);
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let run = Run::start("train", args)?;
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.qsr == Switch::Off {
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
    }
    cfg.validate()?;
    let (ds, folds) = load_data(&args.data)?;
    let fold = pick_fold(&folds, args.fold)?;
    let size = ds.image_size().ok_or_else(|| usage("dataset is empty"))?;
    std::fs::create_dir_all(&args.out).map_err(QsrError::from)?;
    match args.precision {
        Precision::F32 => train_typed::<f32>(&cfg, fold, &ds, args)?,
        Precision::F64 => train_typed::<f64>(&cfg, fold, &ds, args)?,
    }
    let hash = cfg.model_config(size).config_hash();
    run.finish(&args.out, args.config.clone(), Some(cfg.seed), Some(hash))
}

fn evaluate_fold<T: Scalar>(
    model: &FssModel<T>,
    ds: &Dataset,
    fold: &FoldSplit,
    settings: EvalSettings,
    seed: u64,
    mask_dir: Option<&Path>,
) -> CliResult<FoldReport> {
    let episodes = sample_eval_episodes(ds, &fold.test_classes, settings.episodes_per_fold, settings.k, seed)?;
    let eval = evaluate_episodes(model, ds, &episodes, mask_dir.is_some())?;
    if let Some(dir) = mask_dir {
        std::fs::create_dir_all(dir).map_err(QsrError::from)?;
        for (i, e) in eval.episodes.iter().enumerate() {
            if let Some(pred) = &e.prediction {
                save_mask_png(&dir.join(format!("{i:05}_query{}.png", e.query)), &pred.mapv(|v| v * 255))?;
            }
        }
    }
    Ok(FoldReport::from_eval(fold.fold_id, fold.test_classes.iter().copied().collect(), &eval, settings.fpr_mode))
}

fn eval_typed<T: Scalar>(
    ckpt: &Checkpoint,
    expected: Option<&crate::model::ModelConfig>,
    ds: &Dataset,
    fold: &FoldSplit,
    settings: EvalSettings,
    args: &EvalArgs,
) -> CliResult<EvalReport> {
    let model = ckpt.restore_model::<T>(expected)?;
    let mask_dir = args.save_masks.then(|| args.out.join("masks"));
    let report = evaluate_fold(&model, ds, fold, settings, eval_seed(args.seed, fold.fold_id), mask_dir.as_deref())?;
    Ok(EvalReport::new(args.seed, ckpt.header.config_hash.clone(), settings, vec![report]))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let run = Run::start("eval", args)?;
    if args.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    if args.k == 0 {
        return Err(usage("--k must be positive"));
    }
    if !args.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let (ds, folds) = load_data(&args.data)?;
    let fold_id = match args.fold {
        Some(f) => f,
        None => ckpt
            .header
            .metadata
            .get("fold_id")
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| usage("checkpoint has no fold id; pass --fold"))?,
    };
    let fold = pick_fold(&folds, fold_id)?;
    let expected = match &args.config {
        Some(p) => {
            let size = ds.image_size().ok_or_else(|| usage("dataset is empty"))?;
            Some(load_config(Some(p), &[])?.model_config(size))
        }
        None => None,
    };
    let settings = EvalSettings { episodes_per_fold: args.episodes, k: args.k, fpr_mode: args.fpr_mode.into() };
    std::fs::create_dir_all(&args.out).map_err(QsrError::from)?;
    let report = match args.precision {
        Precision::F32 => eval_typed::<f32>(&ckpt, expected.as_ref(), &ds, fold, settings, args)?,
        Precision::F64 => eval_typed::<f64>(&ckpt, expected.as_ref(), &ds, fold, settings, args)?,
    };
    report.write_json(&args.out.join(REPORT_JSON))?;
    report.write_csv(&args.out.join(REPORT_CSV))?;
    log::info!("mIoU {:?} FB-IoU {:?} FPR {:?}", report.mean_miou, report.mean_fb_iou, report.mean_fpr);
    run.finish(&args.out, args.config.clone(), Some(args.seed), Some(ckpt.header.config_hash.clone()))
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let run = Run::start("ablate", args)?;
    let grid = AblationGrid::parse(&args.grid_spec)?;
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    base.validate()?;
    if args.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    if args.seeds.is_empty() {
        return Err(usage("--seeds must name at least one seed"));
    }
    let (ds, all_folds) = load_data(&args.data)?;
    let folds: Vec<FoldSplit> = if args.folds.is_empty() {
        all_folds
    } else {
        args.folds.iter().map(|&id| pick_fold(&all_folds, id).cloned()).collect::<CliResult<_>>()?
    };
    let settings = EvalSettings { episodes_per_fold: args.episodes, k: args.k, fpr_mode: FprMode::Pooled };
    let table = match args.precision {
        Precision::F32 => Experiment::<f32>::new(&ds, &folds, settings)?.ablation(&base, &grid, &args.seeds)?,
        Precision::F64 => Experiment::<f64>::new(&ds, &folds, settings)?.ablation(&base, &grid, &args.seeds)?,
    };
    std::fs::create_dir_all(&args.out).map_err(QsrError::from)?;
    table.write_csv(&args.out.join(ABLATION_CSV))?;
    let hash = crate::evaluation::text_hash(&base.to_kv_string());
    run.finish(&args.out, args.config.clone(), None, Some(hash))
}

pub fn cmd_viz(args: &VizArgs) -> CliResult<()> {
    let run = Run::start("viz", args)?;
    if !args.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    if ckpt.header.kind != CheckpointKind::Training {
        return Err(usage("viz needs a training checkpoint (inference checkpoints drop the class weights)"));
    }
    let model = ckpt.restore_model::<f64>(None)?;
    let (weights, known) = ckpt.restore_class_weights::<f64>()?;
    let (ds, _) = load_data(&args.data)?;
    let classes: BTreeSet<u32> = known.iter().copied().collect();
    let episodes = sample_eval_episodes(&ds, &classes, args.episode + 1, 1, derive_seed(args.seed, "viz"))?;
    let episode = &episodes[args.episode];
    let vis = latent_visualization(&model, &weights, &known, &ds, episode, args.top_n)?;
    std::fs::create_dir_all(&args.out).map_err(QsrError::from)?;
    let written = vis.write_pngs(&args.out, args.episode)?;
    log::info!("wrote {} masks for episode {} (class {})", written.len(), args.episode, episode.class_id);
    run.finish(&args.out, None, Some(args.seed), Some(ckpt.header.config_hash.clone()))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

/// Parses `std::env::args`, runs the command and maps the outcome to an
/// exit code.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
