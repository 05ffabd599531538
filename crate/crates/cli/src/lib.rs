//! `promptseg` command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage or unparseable
//! manifest, 3 runtime failure (including a sweep with failed cells), 4 remote
//! backend unreachable or timed out, 5 remote backend answered badly.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg_core::backends::DEFAULT_THRESHOLD;
use promptseg_core::eval::{compute_distance_matrix, report_file_name};
use promptseg_core::synth::{write_dataset, SynthParams};
use promptseg_core::{
    binarize, build_prompt, decode_image, emit_report, encode_mask_png, load_examples, predict_one,
    sweep, to_grayscale, Aggregation, BackendError, BackendSpec, Dataset, DatasetError, DistanceMatrix, EvalError,
    EvalSettings, Fingerprint, Manifest, Metric, PatchMatchParams, PreprocessConfig, ReportFormat, SimilarityError,
    Split, SsimParams, SweepConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_BACKEND_UNREACHABLE: i32 = 4;
pub const EXIT_BACKEND_PROTOCOL: i32 = 5;

pub const CACHE_DIR_ENV: &str = "PROMPTSEG_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Retrieval-prompted few-shot segmentation")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a manifest and print split counts and image sizes.
    Validate(ValidateArgs),
    /// List the nearest training images for one test image.
    Retrieve(RetrieveArgs),
    /// Predict and write the mask for one test image.
    Predict(PredictArgs),
    /// Evaluate a grid of k values and metrics and write a report.
    Sweep(SweepArgs),
    /// Write a seeded synthetic dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON file with preprocessing settings (target_side, channel_means, channel_stds).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Panel side in pixels; overrides the config file.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub target_side: Option<u32>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    pub parallelism: usize,
    #[arg(long, default_value_t = 11)]
    pub ssim_window: usize,
    #[arg(long, default_value_t = 1.5)]
    pub ssim_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Frobenius,
    Ssim,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Frobenius => Metric::Frobenius,
            MetricArg::Ssim => Metric::Ssim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Reference,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    PatchVote,
    CenterVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendArg::Reference)]
    pub backend: BackendArg,
    /// Base URL of the segmentation server (remote backend).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = 7)]
    pub patch_side: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, value_enum, default_value_t = AggregationArg::PatchVote)]
    pub aggregation: AggregationArg,
    /// Soft-mask values at or above this are foreground.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub test_id: String,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: u32,
    #[arg(long, value_enum, default_value_t = MetricArg::Ssim)]
    pub metric: MetricArg,
    /// Also write the prompt canvas PNG here.
    #[arg(long)]
    pub dump_canvas: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub test_id: String,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: u32,
    #[arg(long, value_enum, default_value_t = MetricArg::Ssim)]
    pub metric: MetricArg,
    /// Binary mask PNG to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the soft mask as an 8-bit grayscale PNG.
    #[arg(long)]
    pub soft_out: Option<PathBuf>,
    #[arg(long)]
    pub dump_canvas: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 15)]
    pub k_max: usize,
    /// Metrics to sweep; repeat or comma-separate. Defaults to both.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub metric: Vec<MetricArg>,
    /// Report file, or a directory to hold a report with the canonical name.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Distance-matrix cache directory.
    #[arg(long, env = CACHE_DIR_ENV)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10)]
    pub n_test: usize,
    #[arg(long, default_value_t = 448)]
    pub side: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
}

/// A failure with a fixed exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn backend_code(e: &BackendError) -> i32 {
    match e {
        BackendError::Connect { .. } | BackendError::Timeout { .. } => EXIT_BACKEND_UNREACHABLE,
        BackendError::Protocol(_) | BackendError::Server { .. } => EXIT_BACKEND_PROTOCOL,
        _ => EXIT_VALIDATION,
    }
}

fn dataset_code(e: &DatasetError) -> i32 {
    match e {
        DatasetError::Parse { .. } => EXIT_USAGE,
        DatasetError::Io { .. } => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

fn eval_code(e: &EvalError) -> i32 {
    match e {
        EvalError::Test { source, .. } => eval_code(source),
        EvalError::Backend(b) => backend_code(b),
        EvalError::Dataset(d) => dataset_code(d),
        EvalError::KTooLarge { .. } | EvalError::InvalidRange { .. } | EvalError::NoMetrics => EXIT_VALIDATION,
        EvalError::Similarity(SimilarityError::KTooLarge { .. } | SimilarityError::UnknownId(_)) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Maps an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return eval_code(e);
        }
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return backend_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return dataset_code(e);
        }
        if let Some(SimilarityError::KTooLarge { .. } | SimilarityError::UnknownId(_)) =
            cause.downcast_ref::<SimilarityError>()
        {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

/// Writes `bytes` to `path` through a temp file in the same directory,
/// creating parent directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

impl DataArgs {
    fn preprocess(&self) -> Result<PreprocessConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| Exit::new(EXIT_USAGE, format!("{}: {e}", p.display())))?
            }
            None => PreprocessConfig::default(),
        };
        if let Some(side) = self.target_side {
            cfg.target_side = side as usize;
        }
        cfg.validate().map_err(|e| Exit::new(EXIT_USAGE, e.to_string()))?;
        Ok(cfg)
    }

    fn ssim(&self) -> Result<SsimParams> {
        let p = SsimParams { window_side: self.ssim_window, gaussian_sigma: self.ssim_sigma, ..SsimParams::default() };
        p.validate().map_err(|e| Exit::new(EXIT_USAGE, e.to_string()))?;
        Ok(p)
    }

    fn load(&self) -> Result<(Manifest, Dataset, PreprocessConfig)> {
        let cfg = self.preprocess()?;
        let manifest = promptseg_core::load_manifest(&self.manifest)?;
        let dataset = promptseg_core::with_workers(self.parallelism, || load_examples(&manifest, &cfg))?;
        dataset.require_splits()?;
        log::info!("loaded {} train and {} test images at {}px", dataset.train.len(), dataset.test.len(), cfg.target_side);
        Ok((manifest, dataset, cfg))
    }
}

impl BackendArgs {
    fn spec(&self) -> Result<BackendSpec> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Exit::new(EXIT_USAGE, "--threshold must lie in [0, 1]").into());
        }
        let spec = match self.backend {
            BackendArg::Reference => BackendSpec::Reference {
                patch: PatchMatchParams {
                    patch_side: self.patch_side,
                    stride: self.stride,
                    aggregation: match self.aggregation {
                        AggregationArg::PatchVote => Aggregation::PatchVote,
                        AggregationArg::CenterVote => Aggregation::CenterVote,
                    },
                },
            },
            BackendArg::Remote => BackendSpec::Remote {
                endpoint: self
                    .endpoint
                    .clone()
                    .ok_or_else(|| Exit::new(EXIT_USAGE, "--backend remote needs --endpoint"))?,
                timeout_secs: self.timeout_secs,
            },
        };
        // Reject bad parameters up front as usage errors.
        spec.build().map_err(|e| Exit::new(EXIT_USAGE, e.to_string()))?;
        Ok(spec)
    }
}

fn find_test<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a promptseg_core::LabeledExample> {
    dataset
        .test
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Exit::new(EXIT_VALIDATION, format!("unknown test id {id:?}")).into())
}

fn check_k(k: usize, dataset: &Dataset) -> Result<()> {
    if k > dataset.train.len() {
        return Err(Exit::new(
            EXIT_VALIDATION,
            format!("k = {k} exceeds the {} training examples", dataset.train.len()),
        )
        .into());
    }
    Ok(())
}

pub fn cmd_validate(args: &ValidateArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = Manifest::parse(&args.manifest)?;
    writeln!(out, "train: {}, test: {}", manifest.count(Split::Train), manifest.count(Split::Test))?;
    let issues = manifest.issues();
    let mut problems: Vec<String> = issues.iter().map(ToString::to_string).collect();
    for split in [Split::Train, Split::Test] {
        if manifest.count(split) == 0 {
            problems.push(DatasetError::EmptySplit(split).to_string());
        }
    }
    // Entries with missing files are already reported; skip decoding them.
    let broken: BTreeSet<String> = issues
        .into_iter()
        .filter_map(|e| match e {
            DatasetError::MissingFile { id, .. } => id,
            _ => None,
        })
        .collect();

    let mut sizes: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in manifest.entries.iter().filter(|e| !broken.contains(&e.id)) {
        let decode = |p: &Path| -> Result<(usize, usize), String> {
            let full = manifest.resolve(p);
            let bytes = fs::read(&full).map_err(|err| format!("entry {:?}: {}: {err}", e.id, full.display()))?;
            let img = decode_image(&bytes).map_err(|err| format!("entry {:?}: {}: {err}", e.id, full.display()))?;
            Ok((img.width(), img.height()))
        };
        match (decode(&e.image_path), decode(&e.mask_path)) {
            (Ok(i), Ok(m)) => {
                if i != m {
                    problems.push(format!(
                        "entry {:?}: image is {}x{} but mask is {}x{}",
                        e.id, i.0, i.1, m.0, m.1
                    ));
                }
                *sizes.entry(i).or_default() += 1;
            }
            (a, b) => problems.extend(a.err().into_iter().chain(b.err())),
        }
    }
    for ((w, h), n) in &sizes {
        writeln!(out, "image size {w}x{h}: {n}")?;
    }
    for p in &problems {
        writeln!(out, "error: {p}")?;
    }
    Ok(if problems.is_empty() { EXIT_OK } else { EXIT_VALIDATION })
}

pub fn cmd_retrieve(args: &RetrieveArgs, out: &mut dyn Write) -> Result<i32> {
    let (_, dataset, _) = args.data.load()?;
    let ssim = args.data.ssim()?;
    let k = args.k as usize;
    check_k(k, &dataset)?;
    let test = find_test(&dataset, &args.test_id)?;
    let pool = promptseg_core::eval::grayscale_pairs(&dataset.train);
    let result = promptseg_core::with_workers(args.data.parallelism, || {
        promptseg_core::knn_retrieve(&test.id, &to_grayscale(&test.image), &pool, k, args.metric.into(), &ssim)
    })?;
    for n in &result.neighbors {
        writeln!(out, "{}\t{:.6}", n.id, n.distance)?;
    }
    if let Some(path) = &args.dump_canvas {
        let exemplars = promptseg_core::eval::exemplars_for(&dataset.train, &result);
        write_atomic(path, &build_prompt(&exemplars, &test.image)?.to_png()?)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = args.backend.spec()?;
    let (_, dataset, _) = args.data.load()?;
    let ssim = args.data.ssim()?;
    let k = args.k as usize;
    check_k(k, &dataset)?;
    let test = find_test(&dataset, &args.test_id)?;
    let backend = spec.build()?;
    let (retrieval, soft) = promptseg_core::with_workers(args.data.parallelism, || {
        predict_one(&dataset.train, &test.id, &test.image, k, args.metric.into(), &ssim, backend.as_ref())
    })?;
    let mask = binarize(&soft, args.backend.threshold);
    if let Some(path) = &args.dump_canvas {
        let exemplars = promptseg_core::eval::exemplars_for(&dataset.train, &retrieval);
        write_atomic(path, &build_prompt(&exemplars, &test.image)?.to_png()?)?;
    }
    write_atomic(&args.out, &encode_mask_png(&mask)?)?;
    if let Some(path) = &args.soft_out {
        write_atomic(path, &soft.to_png()?)?;
    }
    let ids: Vec<&str> = retrieval.ids().collect();
    writeln!(
        out,
        "{}: {} foreground pixels from exemplars {}",
        test.id,
        mask.count_foreground(),
        ids.join(",")
    )?;
    Ok(EXIT_OK)
}

/// Loads a cached matrix for `metric`, or computes and stores one.
fn cached_matrix(
    cache_dir: &Path,
    fingerprint: &Fingerprint,
    dataset: &Dataset,
    cfg: &PreprocessConfig,
    metric: Metric,
    settings: &EvalSettings,
) -> Result<DistanceMatrix> {
    let path = cache_dir.join(format!("{}.csv", fingerprint.cache_key(cfg, metric, &settings.ssim)));
    if let Ok(text) = fs::read_to_string(&path) {
        match DistanceMatrix::from_csv(&text, metric) {
            Ok(m) if m.test_ids.len() == dataset.test.len() && m.train_ids.len() == dataset.train.len() => {
                log::info!("{metric} distances from cache {}", path.display());
                return Ok(m);
            }
            Ok(_) => log::warn!("ignoring cache {} with the wrong shape", path.display()),
            Err(e) => log::warn!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let m = compute_distance_matrix(dataset, metric, settings)?;
    write_atomic(&path, m.to_csv().as_bytes())?;
    log::info!("{metric} distances cached at {}", path.display());
    Ok(m)
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let backend = args.backend.spec()?;
    let metrics: Vec<Metric> = if args.metric.is_empty() {
        Metric::ALL.to_vec()
    } else {
        args.metric.iter().map(|&m| m.into()).collect()
    };
    let ssim = args.data.ssim()?;
    let cfg = args.data.preprocess()?;
    let config = SweepConfig {
        k_min: args.k_min,
        k_max: args.k_max,
        metrics,
        backend,
        preprocess: cfg,
        ssim,
        threshold: args.backend.threshold,
        ..SweepConfig::default()
    };
    // Check the grid against the manifest before loading any pixels.
    let manifest = promptseg_core::load_manifest(&args.data.manifest)?;
    config.validate(manifest.count(Split::Train))?;
    if manifest.count(Split::Test) == 0 {
        return Err(DatasetError::EmptySplit(Split::Test).into());
    }

    let (_, dataset, _) = args.data.load()?;
    let settings = EvalSettings { ssim, threshold: config.threshold, parallelism: args.data.parallelism };
    let fingerprint = Fingerprint::compute(&manifest)?;
    let mut precomputed = BTreeMap::new();
    if let Some(dir) = &args.cache_dir {
        for m in config.canonical_metrics() {
            precomputed.insert(m, cached_matrix(dir, &fingerprint, &dataset, &cfg, m, &settings)?);
        }
    }
    let report = sweep(&dataset, &config, &settings, &precomputed)?;

    let format = match args.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    let path = if args.out.is_dir() || args.out.as_os_str().to_string_lossy().ends_with('/') {
        args.out.join(report_file_name(
            &fingerprint.dataset_hash(),
            config.backend.tag(),
            &config.layout_version,
            format,
        ))
    } else {
        args.out.clone()
    };
    write_atomic(&path, &emit_report(&report, format))?;
    writeln!(out, "{}", path.display())?;

    let failed: Vec<_> = report.failed_cells().collect();
    if failed.is_empty() {
        return Ok(EXIT_OK);
    }
    for c in &failed {
        writeln!(out, "failed: k={} metric={}: {}", c.k, c.metric, c.error.as_deref().unwrap_or_default())?;
    }
    Ok(EXIT_RUNTIME)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    if args.n_train == 0 || args.n_test == 0 || args.n_test > args.n_train || args.side == 0 {
        return Err(Exit::new(EXIT_USAGE, "need 0 < n_test <= n_train and side > 0").into());
    }
    let params = SynthParams {
        n_train: args.n_train,
        n_test: args.n_test,
        side: args.side,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let path = write_dataset(&args.out, &params)?;
    writeln!(out, "{}", path.display())?;
    Ok(EXIT_OK)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

/// Parses `argv`, runs the command and returns the exit code. Normal output
/// goes to `out`, diagnostics to stderr.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Validate(a) => cmd_validate(a, out),
        Command::Retrieve(a) => cmd_retrieve(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
