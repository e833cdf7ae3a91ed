//! The `dcls` command-line tool.
//!
//! Every command writes its report to the supplied writer. Failures come
//! back as a [`CliError`] whose [`Display`](fmt::Display) form is a single
//! `error: <kind>: <message>` line.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, AudioError, FrontendConfig};
use crate::config::{ConfigError, KeyValues};
use crate::container::{Container, ContainerError};
use crate::datasets::{self, DatasetError, SynthConfig, DEFAULT_SYNTH_PEAK};
use crate::dcls::DclsVersion;
use crate::gradcheck::{self, Suite, SuiteError, DEFAULT_SEEDS, TOLERANCE};
use crate::metrics;
use crate::model::{
    self, build_model, count_params, depthwise_weight_count, load_checkpoint, save_checkpoint, surgery_replace_dsc_with_dcls, CheckpointError,
    CheckpointMeta, ConvMethod, Model, ModelError, ModelSpec, SurgeryOptions,
};
use crate::tensor::Tensor;
use crate::train::{self, SpectrogramDataset, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags or flag values.
    Usage,
    /// Missing or malformed input files and invalid configurations.
    Input,
    /// A gradient suite exceeded its tolerance.
    Gradcheck,
    /// Anything else that went wrong while running.
    Runtime,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Input => "input",
            ErrorKind::Gradcheck => "gradcheck",
            ErrorKind::Runtime => "runtime",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage | ErrorKind::Input => 2,
            ErrorKind::Gradcheck => 3,
            ErrorKind::Runtime => 1,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl fmt::Display) -> Self {
        let message = message.to_string().lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ");
        Self { kind, message }
    }

    fn usage(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    fn input(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Input, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: {}: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! input_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::input(e)
            }
        })*
    };
}

input_errors!(AudioError, ConfigError, ContainerError, DatasetError, ModelError, CheckpointError);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Io(_) => CliError::new(ErrorKind::Runtime, e),
            other => CliError::input(other),
        }
    }
}

impl From<SuiteError> for CliError {
    fn from(e: SuiteError) -> Self {
        CliError::new(ErrorKind::Runtime, e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new(ErrorKind::Runtime, e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new(ErrorKind::Runtime, e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// DCLS audio-tagging workbench.
#[derive(Debug, Parser)]
#[command(name = "dcls", version, about)]
pub struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, help_heading = "Global options", default_value_t = 0)]
    pub seed: u64,
    /// Flat `key = value` file overriding the recipe defaults (training keys).
    #[arg(long, global = true, help_heading = "Global options", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, help_heading = "Global options", value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the normalized log-mel spectrogram of a WAV file.
    Spectrogram(SpectrogramArgs),
    /// Generate a synthetic multi-label dataset.
    GenData(GenDataArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the per-class AP report.
    Eval(EvalArgs),
    /// Replace 7×7 depthwise convolutions of a checkpoint by DCLS.
    Surgery(SurgeryArgs),
    /// Run the 64-bit finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Print the parameter ledger of a preset or checkpoint.
    Paramcount(ParamcountArgs),
    /// Measure eval-mode throughput of a baseline and a DCLS checkpoint.
    Bench(BenchArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
}

#[derive(Debug, Args)]
pub struct SpectrogramArgs {
    /// Input WAV file.
    #[arg(long = "in", value_name = "WAV")]
    pub input: PathBuf,
    /// Output container file.
    #[arg(long = "out", value_name = "FILE")]
    pub output: PathBuf,
    /// Resample to 32 kHz instead of rejecting other rates.
    #[arg(long)]
    pub resample: bool,
    /// Pad or truncate the clip to this length first.
    #[arg(long, value_name = "SECONDS")]
    pub clip_seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory (clips/, manifest.csv, labels.txt).
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
    /// Number of clips.
    #[arg(long, default_value_t = 2048)]
    pub clips: usize,
    /// Number of classes (at most 16).
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Clip length.
    #[arg(long, value_name = "SECONDS", default_value_t = 10.0)]
    pub duration: f64,
    /// Peak amplitude of every clip.
    #[arg(long, default_value_t = DEFAULT_SYNTH_PEAK)]
    pub peak: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (CSV with columns path,labels).
    #[arg(long, value_name = "CSV")]
    pub train: PathBuf,
    /// Label vocabulary (default: labels.txt next to the manifest).
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Evaluation manifest for the per-epoch mAP (default: training set).
    #[arg(long, value_name = "CSV")]
    pub eval: Option<PathBuf>,
    /// Vocabulary of the evaluation manifest.
    #[arg(long, value_name = "FILE")]
    pub eval_labels: Option<PathBuf>,
    /// Directory for history.csv, config.txt and model.ckpt.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Model preset: mini or convnext-t.
    #[arg(long, default_value = "mini")]
    pub preset: String,
    /// Depthwise convolution: dsc7, dwK, dcls or dcls:S:M:gauss|bilinear.
    #[arg(long, default_value = "dsc7")]
    pub conv: String,
    /// Start from this checkpoint instead of a fresh preset.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["preset", "conv"])]
    pub init: Option<PathBuf>,
    /// Built-in defaults: default (full recipe) or toy (synthetic data).
    #[arg(long, default_value = "default")]
    pub recipe: String,
    /// Number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Linear warmup epochs.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Training batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimizer: adamw or lamb.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Mixup Beta parameter (0 disables mixup).
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
    /// Label smoothing epsilon.
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Drop-path rate of the last block.
    #[arg(long)]
    pub drop_path: Option<f64>,
    /// Clip length after padding or truncation.
    #[arg(long, value_name = "SECONDS")]
    pub clip_seconds: Option<f64>,
    /// Resample clips to 32 kHz.
    #[arg(long)]
    pub resample: bool,
    /// Any other training key, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Manifest to score.
    #[arg(long, value_name = "CSV")]
    pub manifest: PathBuf,
    /// Label vocabulary (default: labels.txt next to the manifest).
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Write the CSV report here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Clip length after padding or truncation.
    #[arg(long, value_name = "SECONDS")]
    pub clip_seconds: Option<f64>,
    /// Resample clips to 32 kHz.
    #[arg(long)]
    pub resample: bool,
    /// Evaluation batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SurgeryArgs {
    /// Source checkpoint.
    #[arg(long = "in", value_name = "CKPT")]
    pub input: PathBuf,
    /// Converted checkpoint.
    #[arg(long = "out", value_name = "CKPT")]
    pub output: PathBuf,
    /// Dilated kernel size (odd).
    #[arg(long, default_value_t = 23)]
    pub size: usize,
    /// Kernel elements per channel.
    #[arg(long, default_value_t = 26)]
    pub count: usize,
    /// Interpolation: gauss or bilinear.
    #[arg(long, default_value = "gauss")]
    pub version: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Suite to run (repeatable; default all): depthwise, dense, pointwise,
    /// layer-norm, gelu, dcls-gauss, dcls-bilinear, block.
    #[arg(long = "suite", value_name = "NAME")]
    pub suites: Vec<String>,
    /// Seeds per suite.
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct ParamcountArgs {
    /// Model preset: convnext-t or mini.
    #[arg(long, default_value = "convnext-t")]
    pub preset: String,
    /// Depthwise convolution of every stage.
    #[arg(long, default_value = "dsc7")]
    pub conv: String,
    /// Override the preset's class count.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Count a checkpoint instead of a preset.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["preset", "conv", "classes"])]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Baseline checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub baseline: PathBuf,
    /// DCLS checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub dcls: PathBuf,
    /// Items per forward pass.
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Spectrogram frames per item.
    #[arg(long, default_value_t = 1001)]
    pub frames: usize,
    /// Untimed iterations.
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Timed iterations.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Model preset: mini or convnext-t.
    #[arg(long, default_value = "mini")]
    pub preset: String,
    /// Depthwise convolution of every stage.
    #[arg(long, default_value = "dsc7")]
    pub conv: String,
    /// Override the preset's class count.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Output checkpoint.
    #[arg(long = "out", value_name = "CKPT")]
    pub output: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
/// `--help` and `--version` print to `out` and succeed.
pub fn run<I, S>(args: I, out: &mut (dyn Write + Send)) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(out, "{}", e.render())?;
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return Err(CliError::usage(first));
        }
    };
    execute(&cli, out)
}

/// Runs a parsed command inside a pool of `--threads` workers.
pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    match cli.threads {
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| CliError::new(ErrorKind::Runtime, e))?;
            pool.install(|| dispatch(cli, out))
        }
        None => dispatch(cli, out),
    }
}

/// Long help of the top-level command and of every subcommand.
pub fn help_text() -> String {
    let mut cmd = Cli::command();
    let mut text = cmd.render_long_help().to_string();
    for sub in cmd.get_subcommands_mut() {
        text.push_str(&format!("\n== {} ==\n", sub.get_name()));
        text.push_str(&sub.render_long_help().to_string());
    }
    text
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    let file_kv = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let kv = KeyValues::parse(&text, '=')?;
            kv.reject_unknown(train::KEYS)?;
            Some(kv)
        }
        None => None,
    };
    match &cli.command {
        Command::Spectrogram(a) => cmd_spectrogram(a, out),
        Command::GenData(a) => cmd_gen_data(a, cli.seed, out),
        Command::Train(a) => cmd_train(a, file_kv.as_ref(), cli.seed, out),
        Command::Eval(a) => cmd_eval(a, file_kv.as_ref(), out),
        Command::Surgery(a) => cmd_surgery(a, cli.seed, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Paramcount(a) => cmd_paramcount(a, cli.seed, out),
        Command::Bench(a) => cmd_bench(a, cli.seed, out),
        Command::Init(a) => cmd_init(a, cli.seed, out),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!("{}: file not found", path.display())))
    }
}

fn parse_conv(s: &str) -> Result<ConvMethod> {
    s.parse().map_err(CliError::usage)
}

fn labels_for(manifest: &Path, labels: Option<&PathBuf>) -> PathBuf {
    labels.cloned().unwrap_or_else(|| manifest.with_file_name("labels.txt"))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    require_file(path)?;
    Ok(load_checkpoint(path)?.0)
}

fn preset_model(preset: &str, conv: &str, classes: Option<usize>, seed: u64) -> Result<Model<f32>> {
    let spec = ModelSpec::preset(preset, classes)?.with_conv_method(parse_conv(conv)?);
    spec.validate()?;
    Ok(build_model(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn cmd_spectrogram(a: &SpectrogramArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.input)?;
    let cfg = FrontendConfig::default();
    let mut clip = audio::load_wav(&a.input, cfg.sample_rate, a.resample)?;
    if let Some(seconds) = a.clip_seconds {
        if !(seconds > 0.0) {
            return Err(CliError::usage("--clip-seconds must be positive"));
        }
        clip = audio::pad_or_truncate(&clip, (seconds * cfg.sample_rate as f64).round() as usize);
    }
    let logmel = audio::logmel(&clip, &cfg)?;
    let mut meta = KeyValues::default();
    meta.push("kind", "spectrogram");
    meta.push("sample_rate", cfg.sample_rate);
    meta.push("n_fft", cfg.n_fft);
    meta.push("hop", cfg.hop);
    meta.push("n_mels", cfg.n_mels);
    meta.push("source", a.input.display());
    let shape = shape_text(logmel.shape());
    Container { meta, arrays: vec![("logmel".into(), logmel)] }.write(&a.output)?;
    writeln!(out, "{shape}")?;
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig { duration: a.duration, peak: a.peak, ..SynthConfig::new(a.clips, a.classes, seed) };
    let manifest = datasets::gen_synthetic(&a.output, &cfg)?;
    writeln!(out, "wrote {} clips, {} classes, to {}", manifest.len(), manifest.num_classes(), a.output.display())?;
    Ok(())
}

/// Recipe defaults, then the config file, then `--set`, then named flags.
pub fn resolve_train_config(a: &TrainArgs, file_kv: Option<&KeyValues>) -> Result<TrainConfig> {
    let mut cfg = match a.recipe.as_str() {
        "default" => TrainConfig::default(),
        "toy" => TrainConfig::toy(),
        other => return Err(CliError::usage(format!("unknown recipe '{other}' (expected default or toy)"))),
    };
    let mut overlay = KeyValues::default();
    if let Some(kv) = file_kv {
        for (k, v) in kv.iter() {
            overlay.push(k, v);
        }
    }
    for item in &a.set {
        let (k, v) = item.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects key=value, got '{item}'")))?;
        overlay.push(k.trim(), v.trim());
    }
    macro_rules! flag {
        ($field:expr, $key:literal) => {
            if let Some(v) = &$field {
                overlay.push($key, v);
            }
        };
    }
    flag!(a.epochs, "epochs");
    flag!(a.warmup_epochs, "warmup_epochs");
    flag!(a.batch_size, "batch_size");
    flag!(a.lr, "base_lr");
    flag!(a.optimizer, "optimizer");
    flag!(a.mixup_alpha, "mixup_alpha");
    flag!(a.label_smoothing, "label_smoothing");
    flag!(a.drop_path, "drop_path");
    flag!(a.clip_seconds, "clip_seconds");
    if a.resample {
        overlay.push("resample", true);
    }
    // Later entries win; keep only the last value of each key.
    let mut merged = KeyValues::default();
    let keys: Vec<&str> = overlay.keys().collect();
    for (i, (k, v)) in overlay.iter().enumerate() {
        if !keys[i + 1..].contains(&k) {
            merged.push(k, v);
        }
    }
    cfg.apply(&merged)?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, file_kv: Option<&KeyValues>, seed: u64, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_train_config(a, file_kv)?;
    require_file(&a.train)?;
    let train_manifest = datasets::load_manifest(&a.train, &labels_for(&a.train, a.labels.as_ref()))?;
    let eval_manifest = match &a.eval {
        Some(path) => {
            require_file(path)?;
            Some(datasets::load_manifest(path, &labels_for(path, a.eval_labels.as_ref()))?)
        }
        None => None,
    };
    let model = match &a.init {
        Some(path) => load_model(path)?,
        None => preset_model(&a.preset, &a.conv, Some(train_manifest.num_classes()), seed)?,
    };
    let frontend = FrontendConfig::default();
    let train_data = SpectrogramDataset::load(train_manifest, frontend, cfg.clip_seconds, cfg.resample, cfg.augment.on_waveform())?;
    let eval_data = match eval_manifest {
        Some(m) => Some(SpectrogramDataset::load(m, frontend, cfg.clip_seconds, cfg.resample, false)?),
        None => None,
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::input(format!("{}: {e}", a.out_dir.display())))?;
    fs::write(a.out_dir.join("config.txt"), cfg.to_key_values().render(" = "))?;
    let mut log_err = None;
    let outcome = train::train_loop(model, &train_data, eval_data.as_ref(), &cfg, seed, |r| {
        if let Err(e) = writeln!(out, "epoch {} step {} lr {:.3e} loss {:.6} mAP {:.4}", r.epoch, r.step, r.lr, r.loss, r.map) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    train::write_history(fs::File::create(a.out_dir.join("history.csv"))?, &outcome.history)?;
    let ckpt = a.out_dir.join("model.ckpt");
    save_checkpoint(&outcome.model, &CheckpointMeta { seed }, &ckpt)?;
    writeln!(out, "wrote {}", ckpt.display())?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, file_kv: Option<&KeyValues>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(kv) = file_kv {
        cfg.apply(kv)?;
    }
    if let Some(s) = a.clip_seconds {
        cfg.clip_seconds = s;
    }
    if let Some(b) = a.batch_size {
        cfg.eval_batch_size = b;
    }
    cfg.resample |= a.resample;
    cfg.validate()?;
    let model = load_model(&a.checkpoint)?;
    require_file(&a.manifest)?;
    let manifest = datasets::load_manifest(&a.manifest, &labels_for(&a.manifest, a.labels.as_ref()))?;
    let names = manifest.vocabulary.clone();
    let data = SpectrogramDataset::load(manifest, FrontendConfig::default(), cfg.clip_seconds, cfg.resample, false)?;
    let (per_class, map) = train::evaluate(&model, &data, cfg.eval_batch_size)?;
    match &a.report {
        Some(path) => {
            metrics::write_report(fs::File::create(path)?, &per_class, &names)?;
        }
        None => {
            metrics::write_report(&mut *out, &per_class, &names)?;
        }
    }
    writeln!(out, "mAP {map:.6} over {} clips", data.len())?;
    Ok(())
}

fn cmd_surgery(a: &SurgeryArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let version: DclsVersion = a.version.parse().map_err(CliError::usage)?;
    let opts = SurgeryOptions { dilated_size: a.size, kernel_count: a.count, version };
    let model = load_model(&a.input)?;
    let (converted, report) = surgery_replace_dsc_with_dcls(&model, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
    for layer in &report.replaced {
        let role = if layer.owns_group { "new group" } else { "shared" };
        writeln!(out, "replaced {} ({} channels) -> {} [{role}]", layer.name, layer.channels, layer.share_tag)?;
    }
    writeln!(out, "{} replacements, {} shared position groups", report.replaced.len(), report.groups_created)?;
    let delta = report.params_after as i64 - report.params_before as i64;
    writeln!(out, "params {} -> {} ({delta:+})", report.params_before, report.params_after)?;
    save_checkpoint(&converted, &CheckpointMeta { seed }, &a.output)?;
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let suites: Vec<Suite> = if a.suites.is_empty() || a.suites.iter().any(|s| s == "all") {
        Suite::ALL.to_vec()
    } else {
        a.suites.iter().map(|s| s.parse().map_err(CliError::usage)).collect::<Result<_>>()?
    };
    let mut failed = Vec::new();
    for suite in suites {
        let r = gradcheck::run_suite(suite, a.seeds)?;
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{suite}: {} seeds, max rel err < {TOLERANCE:e}: {verdict} (worst {:.3e}, seed {}, {}; {:.2} s)",
            r.seeds,
            r.max_rel_err,
            r.worst_seed,
            r.worst_operand,
            r.elapsed.as_secs_f64()
        )?;
        if !r.passed() {
            failed.push(suite.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(ErrorKind::Gradcheck, format!("tolerance exceeded in {}", failed.join(", "))))
    }
}

fn cmd_paramcount(a: &ParamcountArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let model = match &a.checkpoint {
        Some(path) => load_model(path)?,
        None => preset_model(&a.preset, &a.conv, a.classes, seed)?,
    };
    let count = count_params(&model);
    for (layer, n) in &count.layers {
        writeln!(out, "{layer}\t{n}")?;
    }
    writeln!(out, "depthwise weights\t{}", depthwise_weight_count(&model))?;
    writeln!(out, "total\t{} ({:.1} M)", count.total, count.total as f64 / 1e6)?;
    Ok(())
}

/// Eval-mode samples per second on random spectrograms of `frames`
/// frames: `warmup` untimed passes, then the mean over `iters` timed ones.
pub fn eval_throughput(model: &Model<f32>, batch: usize, frames: usize, warmup: usize, iters: usize, seed: u64) -> Result<f64, ModelError> {
    if batch == 0 || iters == 0 {
        return Err(ModelError::Input { got: vec![batch, iters], detail: "batch size and timed iterations must be positive".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mels = FrontendConfig::default().n_mels;
    let x = Tensor::<f32>::from_fn([batch, 1, mels, frames], |_| rng.gen_range(-1.0..1.0));
    for _ in 0..warmup {
        model.predict(&x)?;
    }
    let start = Instant::now();
    for _ in 0..iters {
        model.predict(&x)?;
    }
    Ok((batch * iters) as f64 / start.elapsed().as_secs_f64())
}

fn cmd_bench(a: &BenchArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let baseline = load_model(&a.baseline)?;
    let dcls = load_model(&a.dcls)?;
    if baseline.spec.stages.len() != dcls.spec.stages.len()
        || baseline.spec.stages.iter().zip(&dcls.spec.stages).any(|(x, y)| (x.depth, x.channels) != (y.depth, y.channels))
    {
        return Err(CliError::input("baseline and DCLS checkpoints have different stage layouts"));
    }
    let base_rate = eval_throughput(&baseline, a.batch_size, a.frames, a.warmup, a.iters, seed)?;
    let dcls_rate = eval_throughput(&dcls, a.batch_size, a.frames, a.warmup, a.iters, seed)?;
    writeln!(out, "baseline {:.3} samples/s", base_rate)?;
    writeln!(out, "dcls {:.3} samples/s", dcls_rate)?;
    writeln!(out, "ratio {:.4}", dcls_rate / base_rate)?;
    Ok(())
}

fn cmd_init(a: &InitArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let model = preset_model(&a.preset, &a.conv, a.classes, seed)?;
    save_checkpoint(&model, &CheckpointMeta { seed }, &a.output)?;
    writeln!(out, "wrote {} ({} parameters)", a.output.display(), model::count_params(&model).total)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (Result<()>, String) {
        let mut buf = Vec::new();
        let r = run(std::iter::once("dcls").chain(args.iter().copied()), &mut buf);
        (r, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (r, _) = run_str(&["gradcheck", "--bogus"]);
        let e = r.unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().starts_with("error: usage: "), "{e}");
        assert_eq!(e.to_string().lines().count(), 1);
    }

    #[test]
    fn missing_file_exits_2() {
        let (r, _) = run_str(&["eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", "/nonexistent.csv"]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn help_succeeds() {
        let (r, text) = run_str(&["train", "--help"]);
        r.unwrap();
        assert!(text.contains("--out-dir"));
    }

    #[test]
    fn flags_override_set_and_recipe() {
        let cli = Cli::try_parse_from(["dcls", "train", "--train", "m.csv", "--out-dir", "o", "--recipe", "toy", "--set", "epochs=4", "--epochs", "3"]).unwrap();
        let Command::Train(a) = &cli.command else { panic!() };
        let file = KeyValues::parse("epochs = 9\nbase_lr = 0.01\n", '=').unwrap();
        let cfg = resolve_train_config(a, Some(&file)).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.base_lr, 0.01);
        assert_eq!(cfg.clip_seconds, 1.0);
    }

    #[test]
    fn gradcheck_reports_pass() {
        let (r, text) = run_str(&["gradcheck", "--suite", "gelu", "--seeds", "2"]);
        r.unwrap();
        assert!(text.contains("max rel err < 1e-4: PASS"), "{text}");
    }
}
