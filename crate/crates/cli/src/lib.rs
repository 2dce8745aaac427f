//! `lupi` command-line driver.

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lupi_core::dataset::{
    build_split, enhance_patch_with, extract_all, read_archive, read_sources, write_archive, write_sources,
    EnhancedPatch, PatchRecord,
};
use lupi_core::evaluation::{
    config_hash, evaluate_model, experiment_map, render_report, run_map, F1Mode, MetricsRow, ReportFormat,
    ReportMeta,
};
use lupi_core::imaging::{save_gray_image, GrayImage};
use lupi_core::nn::checkpoint::peek_precision;
use lupi_core::nn::{Precision, Scalar};
use lupi_core::synthetic::generate_scene;
use lupi_core::training::{train_pi_student, train_student, train_teacher, OptimizerKind, TrainedModel};
use lupi_core::unet::UNetModel;
use serde::{Deserialize, Serialize};

use config::RunConfig;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<lupi_core::Error> for CliError {
    fn from(e: lupi_core::Error) -> Self {
        use lupi_core::Error as E;
        let code = match &e {
            E::Argument(_) => EXIT_CONFIG,
            E::Io { .. } | E::Format(_) | E::Corrupt { .. } | E::Shape(_) | E::Pairing(_) => EXIT_DATA,
            E::Numeric(_) | E::DegenerateVariance(_) => EXIT_NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "lupi", version, about = "Teacher/student segmentation with privileged inputs")]
pub struct Cli {
    /// TOML run configuration; command-line flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory under which run directories are created (overrides runs_dir)
    #[arg(long, global = true, value_name = "DIR")]
    pub runs_dir: Option<PathBuf>,
    /// Log filter for standard error, e.g. info or lupi_core=debug
    #[arg(long, global = true, default_value = "info", value_name = "FILTER")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic images and masks into a scene directory
    Synth(SynthArgs),
    /// Extract patches from a scene directory into a patch archive
    Extract(ExtractArgs),
    /// Write the enhanced teacher channels of every archived patch
    Enhance(EnhanceArgs),
    /// Train a teacher, baseline student or privileged-information student
    Train(TrainArgs),
    /// Score a checkpoint on an archive with pixel-wise F1
    Evaluate(EvaluateArgs),
    /// Run the experiment map on an archive and write reports
    RunMap(RunMapArgs),
    /// Re-render reports from a metrics file written by run-map
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output scene directory (default: <run dir>/scenes)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of patients
    #[arg(long)]
    pub patients: Option<usize>,
    /// Images per patient
    #[arg(long)]
    pub images_per_patient: Option<usize>,
    /// Side length of each square image in pixels
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Generator seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Scene directory containing scenes.json
    #[arg(long, value_name = "DIR")]
    pub scenes: PathBuf,
    /// Output archive directory (default: <run dir>/patches)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Patch side length in pixels
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Healthy patches per image
    #[arg(long)]
    pub h_ppi: Option<usize>,
    /// Non-healthy patches per image
    #[arg(long)]
    pub nh_ppi: Option<usize>,
    /// Extraction seed (overrides the global seed)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Patch archive directory
    #[arg(long, value_name = "DIR")]
    pub archive: PathBuf,
    /// Output directory (default: <run dir>/enhanced)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Lower percentile of the contrast stretch
    #[arg(long)]
    pub p_low: Option<f64>,
    /// Upper percentile of the contrast stretch
    #[arg(long)]
    pub p_high: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Teacher,
    Student,
    Pi,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecisionArg {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerArg {
    SgdMomentum,
    Adam,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Which model to train
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Training patch archive
    #[arg(long, value_name = "DIR")]
    pub archive: PathBuf,
    /// Optional validation archive, scored after every epoch
    #[arg(long, value_name = "DIR")]
    pub val_archive: Option<PathBuf>,
    /// Weight of the ground-truth term in pi mode, in [0, 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Frozen teacher checkpoint (required in pi mode)
    #[arg(long, value_name = "FILE")]
    pub teacher: Option<PathBuf>,
    /// Output checkpoint path (default: <run dir>/model.ckpt)
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer learning rate
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Optimizer
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Channel width of the first UNet block
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Training seed (initialization and batch order)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Floating-point precision
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1ModeArg {
    Micro,
    Macro,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Model checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Patch archive to score
    #[arg(long, value_name = "DIR")]
    pub archive: PathBuf,
    /// F1 aggregation
    #[arg(long, value_enum)]
    pub f1_mode: Option<F1ModeArg>,
}

#[derive(Args, Debug)]
pub struct RunMapArgs {
    /// Patch archive holding both training and test patients
    #[arg(long, value_name = "DIR")]
    pub archive: PathBuf,
    /// Worker threads for independent experiment cells
    #[arg(long)]
    pub workers: Option<usize>,
    /// Base seed for the repetitions when the config lists none
    #[arg(long)]
    pub seed: Option<u64>,
    /// Floating-point precision
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatArg {
    TableText,
    Csv,
    PlotData,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::TableText => Self::TableText,
            FormatArg::Csv => Self::Csv,
            FormatArg::PlotData => Self::PlotData,
        }
    }
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// metrics.json written by run-map
    #[arg(long, value_name = "FILE")]
    pub metrics: PathBuf,
    /// Report format
    #[arg(long, value_enum, default_value = "table-text")]
    pub format: FormatArg,
    /// Output file (default: standard output)
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Rows plus the header data needed to re-render them.
#[derive(Serialize, Deserialize)]
pub struct MetricsFile {
    pub meta: ReportMeta,
    pub rows: Vec<MetricsRow>,
    /// Experiment id and message of the first failing cell, if any.
    pub failure: Option<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct EvaluationFile {
    checkpoint: String,
    archive: String,
    patches: usize,
    f1_mode: F1Mode,
    f1: f64,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::from(lupi_core::Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable artifact");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Resolved config plus the run directory it was recorded in.
struct Run {
    config: RunConfig,
    hash: String,
    dir: PathBuf,
}

impl Run {
    fn start(config: RunConfig, command: &str) -> CliResult<Self> {
        config.validate()?;
        let hash = config_hash(&config);
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = config.runs_dir.join(format!("{}-{stamp}", &hash[..12]));
        let mut dir = base.clone();
        let mut n = 1;
        while dir.exists() {
            dir = PathBuf::from(format!("{}-{n}", base.display()));
            n += 1;
        }
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, config.to_toml()).map_err(|e| io_err(&path, e))?;
        log::info!("command={command} config_hash={hash} run_dir={}", dir.display());
        log::debug!("resolved config:\n{}", config.to_toml());
        Ok(Self { config, hash, dir })
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.runs_dir {
        config.runs_dir = d.clone();
    }
    Ok(config)
}

fn precision_of(p: PrecisionArg) -> Precision {
    match p {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_millis()
        .try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{}", e.message);
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::Synth(a) => {
            let s = &mut config.synthetic;
            s.patient_count = a.patients.unwrap_or(s.patient_count);
            s.images_per_patient = a.images_per_patient.unwrap_or(s.images_per_patient);
            s.image_size = a.image_size.unwrap_or(s.image_size);
            s.seed = a.seed.unwrap_or(s.seed);
            let run = Run::start(config, "synth")?;
            let out = a.out.clone().unwrap_or_else(|| run.dir.join("scenes"));
            let scenes = generate_scene(&run.config.synthetic)?;
            write_sources(&out, &scenes)?;
            log::info!("wrote {} scenes to {}", scenes.len(), out.display());
            println!("{}", out.display());
        }
        Command::Extract(a) => {
            let e = &mut config.extraction;
            e.patch_size = a.patch_size.unwrap_or(e.patch_size);
            e.h_ppi = a.h_ppi.unwrap_or(e.h_ppi);
            e.nh_ppi = a.nh_ppi.unwrap_or(e.nh_ppi);
            config.seed = a.seed.unwrap_or(config.seed);
            let run = Run::start(config, "extract")?;
            let out = a.out.clone().unwrap_or_else(|| run.dir.join("patches"));
            let sources = read_sources(&a.scenes)?;
            let (patches, shortfall) = extract_all(&sources, &run.config.extraction, run.config.seed)?;
            write_archive(&out, &patches, Some(&run.config.extraction), Some(run.config.seed))?;
            log::info!(
                "extracted {} patches from {} images (shortfall healthy={} non_healthy={})",
                patches.len(),
                sources.len(),
                shortfall.healthy,
                shortfall.non_healthy
            );
            println!("{}", out.display());
        }
        Command::Enhance(a) => {
            let e = &mut config.enhance;
            e.p_low = a.p_low.unwrap_or(e.p_low);
            e.p_high = a.p_high.unwrap_or(e.p_high);
            let run = Run::start(config, "enhance")?;
            let out = a.out.clone().unwrap_or_else(|| run.dir.join("enhanced"));
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let (manifest, patches) = read_archive(&a.archive)?;
            for (entry, p) in manifest.patches.iter().zip(&patches) {
                let enh = enhance_patch_with(p, &run.config.enhance)?;
                let stem = entry.image_file.trim_end_matches("_image.png");
                for (k, ch) in enh.channels.iter().enumerate().skip(1) {
                    let img = GrayImage::new(ch.width(), ch.height(), ch.data().to_vec(), 16)?;
                    save_gray_image(&img, out.join(format!("{stem}_ch{k}.png")))?;
                }
            }
            log::info!("enhanced {} patches into {}", patches.len(), out.display());
            println!("{}", out.display());
        }
        Command::Train(a) => train_command(a, config)?,
        Command::Evaluate(a) => {
            if let Some(m) = a.f1_mode {
                config.map.f1_mode = match m {
                    F1ModeArg::Micro => F1Mode::Micro,
                    F1ModeArg::Macro => F1Mode::Macro,
                };
            }
            let run = Run::start(config, "evaluate")?;
            let (_, patches) = read_archive(&a.archive)?;
            let f1 = match peek_precision(&a.checkpoint)? {
                Precision::F32 => evaluate_checkpoint::<f32>(&a.checkpoint, &patches, &run.config)?,
                Precision::F64 => evaluate_checkpoint::<f64>(&a.checkpoint, &patches, &run.config)?,
            };
            write_json(
                &run.dir.join("evaluation.json"),
                &EvaluationFile {
                    checkpoint: a.checkpoint.display().to_string(),
                    archive: a.archive.display().to_string(),
                    patches: patches.len(),
                    f1_mode: run.config.map.f1_mode,
                    f1,
                },
            )?;
            log::info!("f1={f1:.6} over {} patches", patches.len());
            println!("{f1}");
        }
        Command::RunMap(a) => {
            config.workers = a.workers.or(config.workers);
            config.seed = a.seed.unwrap_or(config.seed);
            if let Some(p) = a.precision {
                config.train.precision = precision_of(p);
            }
            let run = Run::start(config, "run-map")?;
            run_map_command(a, &run)?;
        }
        Command::Report(a) => {
            let text = std::fs::read_to_string(&a.metrics).map_err(|e| io_err(&a.metrics, e))?;
            let metrics: MetricsFile = serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("{}: {e}", a.metrics.display())))?;
            let report = render_report(&metrics.rows, a.format.into(), &metrics.meta)?;
            match &a.out {
                Some(p) => std::fs::write(p, report).map_err(|e| io_err(p, e))?,
                None => print!("{report}"),
            }
        }
    }
    Ok(())
}

fn enhance_all(patches: &[PatchRecord], config: &RunConfig) -> CliResult<Vec<EnhancedPatch>> {
    Ok(patches
        .iter()
        .map(|p| enhance_patch_with(p, &config.enhance))
        .collect::<Result<_, _>>()?)
}

fn evaluate_checkpoint<T: Scalar>(path: &Path, patches: &[PatchRecord], config: &RunConfig) -> CliResult<f64> {
    let model = UNetModel::<T>::load(path)?;
    let mode = config.map.f1_mode;
    Ok(if model.config().in_channels == 3 {
        evaluate_model(&model, &enhance_all(patches, config)?, mode)?
    } else {
        evaluate_model(&model, patches, mode)?
    })
}

fn train_command(a: &TrainArgs, mut config: RunConfig) -> CliResult<()> {
    let t = &mut config.train;
    t.alpha = a.alpha.unwrap_or(t.alpha);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.max_steps = a.max_steps.or(t.max_steps);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.base_width = a.base_width.unwrap_or(t.base_width);
    t.seed = a.seed.unwrap_or(t.seed);
    if let Some(o) = a.optimizer {
        t.optimizer = match o {
            OptimizerArg::SgdMomentum => OptimizerKind::SgdMomentum,
            OptimizerArg::Adam => OptimizerKind::Adam,
        };
    }
    if let Some(p) = a.precision {
        t.precision = precision_of(p);
    }
    if a.mode == Mode::Pi && a.teacher.is_none() {
        return Err(CliError::config("train: --teacher is required with --mode pi"));
    }
    let run = Run::start(config, "train")?;
    match run.config.train.precision {
        Precision::F32 => train_typed::<f32>(a, &run),
        Precision::F64 => train_typed::<f64>(a, &run),
    }
}

fn train_typed<T: Scalar>(a: &TrainArgs, run: &Run) -> CliResult<()> {
    let cfg = &run.config.train;
    let (_, train) = read_archive(&a.archive)?;
    let val = match &a.val_archive {
        Some(d) => read_archive(d)?.1,
        None => Vec::new(),
    };
    let trained: TrainedModel<T> = match a.mode {
        Mode::Teacher => {
            let (tr, va) = (enhance_all(&train, &run.config)?, enhance_all(&val, &run.config)?);
            train_teacher(&tr, &va, cfg)?
        }
        Mode::Student => train_student(&train, &val, cfg)?,
        Mode::Pi => {
            let path = a.teacher.as_ref().expect("checked above");
            let teacher = UNetModel::<T>::load(path)?;
            let enhanced = enhance_all(&train, &run.config)?;
            train_pi_student(&train, &enhanced, &teacher, &val, cfg)?
        }
    };
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| run.dir.join("model.ckpt"));
    trained.model.save(&ckpt)?;
    write_json(&run.dir.join("history.json"), &trained.history)?;
    log::info!(
        "saved {} after {} steps (config_hash={})",
        ckpt.display(),
        trained.history.steps(),
        run.hash
    );
    println!("{}", ckpt.display());
    Ok(())
}

fn run_map_command(a: &RunMapArgs, run: &Run) -> CliResult<()> {
    let c = &run.config;
    let (_, patches) = read_archive(&a.archive)?;
    let split = build_split(patches, c.split.train_patients, c.split.folds, c.split.shuffle_seed)?;
    log::info!(
        "split: {} train patches ({} patients) / {} test patches ({} patients), folds {:?}",
        split.train_patches.len(),
        split.train_patients().len(),
        split.test_patches.len(),
        split.test_patients().len(),
        split.folds.iter().map(|f| f.len()).collect::<Vec<_>>()
    );
    let specs = experiment_map(&c.map.folds, &c.map.range_ends, &c.experiment_template());
    for s in &specs {
        s.validate(&split).map_err(|e| CliError::config(format!("map: {e}")))?;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = c.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::config(format!("workers: {e}")))?;
    let outcome = pool.install(|| match c.train.precision {
        Precision::F32 => run_map::<f32>(&specs, &split),
        Precision::F64 => run_map::<f64>(&specs, &split),
    });

    let meta = ReportMeta {
        config_hash: run.hash.clone(),
        seeds: c.map_seeds(),
    };
    let metrics = MetricsFile {
        meta: meta.clone(),
        rows: outcome.rows,
        failure: outcome.failure.as_ref().map(|(id, e)| (id.clone(), e.to_string())),
    };
    write_json(&run.dir.join("metrics.json"), &metrics)?;
    if !metrics.rows.is_empty() {
        for f in &c.report.formats {
            let path = run.dir.join(format!("report.{}", f.extension()));
            let text = render_report(&metrics.rows, *f, &meta)?;
            std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        }
    }
    println!("{}", run.dir.display());
    match outcome.failure {
        Some((id, e)) => {
            let mut err = CliError::from(e);
            err.message = format!("{id}: {} (partial report of {} rows written)", err.message, metrics.rows.len());
            Err(err)
        }
        None => Ok(()),
    }
}
