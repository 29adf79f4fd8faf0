//! `ditlab` subcommands. Each command resolves its run configuration from
//! defaults, then an optional JSON file, then flags, and writes the resolved
//! snapshot as `config.json` next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use ditlab_core::checkpoint::{load_checkpoint, save_checkpoint};
use ditlab_core::compress::{prune_heads, quantize_model, QuantMode};
use ditlab_core::config::preset_suite;
use ditlab_core::costmodel::{cost_report, profile_model, render_table, CostReport};
use ditlab_core::data::{decode_latent, synthetic_images, Dataset, SyntheticSpec};
use ditlab_core::diffusion::{ddpm_sample_loop, NoiseSchedule, StepLoss};
use ditlab_core::evalmetrics::{
    frechet_distance, image_diff, load_image, save_image, FeatureProjector, GaussianSummary, DEFAULT_DIFF_TAU,
};
use ditlab_core::optim::AdamWConfig;
use ditlab_core::trainer::{self, TrainSettings};
use ditlab_core::{DiTModel, Error, ModelConfig, Tensor};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ditlab", version, about = "Train, compress, sample and profile small diffusion transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Draw class-conditional samples from a checkpoint.
    Sample(SampleArgs),
    /// Analytic cost table, optionally with measured throughput.
    Profile(ProfileArgs),
    /// Keep the top-k attention heads per layer.
    Prune(PruneArgs),
    /// Int8 weight quantization.
    Quantize(QuantizeArgs),
    /// Pixel diff and Fréchet distance between two sample directories.
    Compare(CompareArgs),
    /// Write a synthetic image-folder dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Model preset, e.g. `S/2`, `XS/4-base`, `MoE-S/2-8E2A`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Attention variant: `base`, `shallow`, `med-<n>` or `fg-<g>`.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Image folder (one subdirectory per class) instead of synthetic data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write a checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated class ids.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: Common,
    /// Preset name; repeatable.
    #[arg(long)]
    pub preset: Vec<String>,
    /// Named preset suite: `presets` (all twelve).
    #[arg(long)]
    pub suite: Option<String>,
    /// Timed forwards per model; 0 skips measurement.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub keep_heads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `per_channel` or `per_tensor`.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

/// Usage-level failure (bad flags or config values).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Map an error chain onto the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NumericDomain(_) => EXIT_NUMERIC,
                Error::Config(_) | Error::UnsupportedVariant(_) | Error::Contract(_) => EXIT_USAGE,
                Error::Input(_) | Error::Shape(_) | Error::Io(_) | Error::Json(_) | Error::Image(_) => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() || cause.is::<csv::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

/// Parse `args` and run; prints errors to stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined by `: `, skipping causes already spelled out.
pub fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Distill(a) => cmd_distill(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Profile(a) => cmd_profile(&a),
        Command::Prune(a) => cmd_prune(&a),
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

// ---------------------------------------------------------------------------
// configuration

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// defaults < `file` < `flags`.
pub fn resolve<T>(file: Option<&Path>, flags: Value) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut v = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let from_file: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !from_file.is_object() {
            return Err(usage(format!("config {} is not a JSON object", path.display())));
        }
        merge(&mut v, from_file);
    }
    merge(&mut v, flags);
    serde_json::from_value(v).map_err(|e| usage(format!("invalid configuration: {e}")))
}

/// Object holding only the flags that were given.
fn flags<const N: usize>(pairs: [(&str, Option<Value>); N]) -> Value {
    let mut m = Map::new();
    for (k, v) in pairs {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    }
    Value::Object(m)
}

fn opt<T: Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(|v| serde_json::to_value(v).expect("plain flag value"))
}

fn prepare_out(out: &Path, resolved: &impl Serialize) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), resolved)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load(path: &Path) -> Result<DiTModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn required<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("missing required setting '{what}'")))
}

// ---------------------------------------------------------------------------
// train / distill

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Gabor textures at the model's input size.
    Synthetic { classes: usize, per_class: usize, seed: u64 },
    /// `path/<class>/*.png`, resized to the model's input size.
    Folder { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic { classes: 8, per_class: 16, seed: 0 }
    }
}

impl DataSource {
    pub fn load(&self, size: usize) -> Result<Dataset> {
        Ok(match self {
            Self::Synthetic { classes, per_class, seed } => {
                Dataset::synthetic(&SyntheticSpec { classes: *classes, per_class: *per_class, size, seed: *seed })?
            }
            Self::Folder { path } => Dataset::from_folder(path, size)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub seed: u64,
    pub out: PathBuf,
    /// Preset used when `model` is absent.
    pub preset: Option<String>,
    /// Attention override applied to the preset.
    pub variant: Option<String>,
    /// Full architecture; wins over `preset` and `variant`.
    pub model: Option<ModelConfig>,
    pub data: DataSource,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Distillation only.
    pub teacher: Option<PathBuf>,
    /// Distillation only.
    pub alpha: f64,
}

impl Default for TrainRun {
    fn default() -> Self {
        let s = TrainSettings::default();
        Self {
            seed: 0,
            out: PathBuf::from("runs/train"),
            preset: None,
            variant: None,
            model: None,
            data: DataSource::default(),
            steps: s.steps,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
            checkpoint_every: 0,
            teacher: None,
            alpha: 0.5,
        }
    }
}

pub const DEFAULT_PRESET: &str = "XS/2-base";

/// `preset` with its attention swapped for `variant`.
pub fn model_from(preset: &str, variant: Option<&str>) -> Result<ModelConfig> {
    let base = ModelConfig::from_name(preset)?;
    let Some(v) = variant else { return Ok(base) };
    let size = preset.trim_start_matches("MoE-").split('-').next().unwrap_or_default();
    let attention = ModelConfig::from_name(&format!("{size}-{v}"))?.attention;
    Ok(base.with_attention(attention))
}

impl TrainRun {
    fn model_config(&self, fallback: Option<&ModelConfig>) -> Result<ModelConfig> {
        let cfg = match (&self.model, &self.preset, fallback) {
            (Some(m), _, _) => {
                let mut m = m.clone();
                if let Some(v) = &self.variant {
                    m.attention = model_from("S/2", Some(v))?.attention;
                }
                m
            }
            (None, Some(p), _) => model_from(p, self.variant.as_deref())?,
            (None, None, Some(f)) => {
                let mut m = f.clone();
                m.keep_heads = None;
                if let Some(v) = &self.variant {
                    m.attention = model_from("S/2", Some(v))?.attention;
                }
                m
            }
            (None, None, None) => model_from(DEFAULT_PRESET, self.variant.as_deref())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn settings(&self) -> TrainSettings {
        TrainSettings { steps: self.steps, batch_size: self.batch_size, seed: self.seed, optimizer: self.optimizer }
    }
}

fn train_flags(a: &TrainArgs) -> Value {
    let mut v = flags([
        ("seed", opt(&a.common.seed)),
        ("out", opt(&a.common.out)),
        ("preset", opt(&a.model.preset)),
        ("variant", opt(&a.model.variant)),
        ("steps", opt(&a.steps)),
        ("batch_size", opt(&a.batch_size)),
        ("checkpoint_every", opt(&a.checkpoint_every)),
        ("data", a.data.as_ref().map(|p| json!({"kind": "folder", "path": p}))),
        ("optimizer", a.lr.map(|lr| json!({ "lr": lr }))),
    ]);
    // A preset flag replaces any architecture from the config file.
    if a.model.preset.is_some() {
        v["model"] = Value::Null;
    }
    v
}

pub const LOSS_CSV: &str = "loss.csv";
pub const MODEL_FILE: &str = "model.json";

fn run_training(
    run: &TrainRun,
    model: &mut DiTModel,
    fit: impl FnOnce(&mut DiTModel, &Dataset, &TrainSettings, &mut StepFn<'_>) -> ditlab_core::Result<Vec<StepLoss>>,
) -> Result<()> {
    let data = run.data.load(model.config.input_size)?;
    let mut csv = csv::Writer::from_path(run.out.join(LOSS_CSV))?;
    csv.write_record(["step", "loss", "l_diff", "l_kd", "l_balance"])?;
    let every = run.checkpoint_every;
    let mut log = |step: usize, l: &StepLoss, m: &DiTModel| -> ditlab_core::Result<()> {
        csv.write_record([
            step.to_string(),
            l.loss.to_string(),
            l.l_diff.to_string(),
            l.l_kd.to_string(),
            l.l_balance.to_string(),
        ])
        .map_err(|e| Error::Io(e.into()))?;
        if every > 0 && (step + 1) % every == 0 {
            save_checkpoint(m, &run.out.join(format!("ckpt_step{:06}.json", step + 1)))?;
        }
        Ok(())
    };
    let result = fit(model, &data, &run.settings(), &mut log);
    csv.flush()?;
    result?;
    save_checkpoint(model, &run.out.join(MODEL_FILE))?;
    Ok(())
}

type StepFn<'a> = dyn FnMut(usize, &StepLoss, &DiTModel) -> ditlab_core::Result<()> + 'a;

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run: TrainRun = resolve(a.common.config.as_deref(), train_flags(a))?;
    let cfg = run.model_config(None)?;
    run.model = Some(cfg.clone());
    prepare_out(&run.out, &run)?;
    let mut model = DiTModel::new(cfg, run.seed)?;
    run_training(&run, &mut model, |m, d, s, cb| trainer::train(m, d, s, cb))
}

pub fn cmd_distill(a: &DistillArgs) -> Result<()> {
    let mut fl = train_flags(&a.train);
    if let Some(t) = &a.teacher {
        fl["teacher"] = json!(t);
    }
    if let Some(al) = a.alpha {
        fl["alpha"] = json!(al);
    }
    let mut run: TrainRun = resolve(a.train.common.config.as_deref(), fl)?;
    if !(0.0..=1.0).contains(&run.alpha) {
        return Err(usage(format!("alpha must lie in [0, 1], got {}", run.alpha)));
    }
    let mut teacher = load(required(&run.teacher, "teacher")?)?;
    teacher.params.freeze();
    let cfg = run.model_config(Some(&teacher.config))?;
    run.model = Some(cfg.clone());
    prepare_out(&run.out, &run)?;
    let mut student = DiTModel::new(cfg, run.seed)?;
    let alpha = run.alpha;
    run_training(&run, &mut student, |m, d, s, cb| trainer::distill(m, &teacher, d, s, alpha, cb))
}

// ---------------------------------------------------------------------------
// sample

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRun {
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Empty means the first `min(8, num_classes)` classes.
    pub classes: Vec<usize>,
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SampleRun {
    fn default() -> Self {
        Self { seed: 0, out: PathBuf::from("runs/samples"), checkpoint: None, classes: Vec::new(), steps: 250, cfg_scale: 4.0 }
    }
}

pub fn sample_file(class: usize, seed: u64) -> String {
    format!("class{class:03}_seed{seed}.png")
}

pub fn montage_file(seed: u64) -> String {
    format!("montage_seed{seed}.png")
}

/// Latent `[4, S, S]` → RGB `[3, S, S]` in `[0, 1]`.
pub fn latent_to_image(latent: &Tensor) -> Result<Tensor> {
    Ok(decode_latent(latent)?.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))
}

fn montage(images: &[Tensor]) -> Result<Tensor> {
    let s = images[0].shape()[1];
    let n = images.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (h, w) = (rows * s, cols * s);
    let mut out = vec![0.0; 3 * h * w];
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * s, (k % cols) * s);
        for c in 0..3 {
            for i in 0..s {
                for j in 0..s {
                    out[c * h * w + (r0 + i) * w + c0 + j] = img.data()[c * s * s + i * s + j];
                }
            }
        }
    }
    Ok(Tensor::new([3, h, w], out)?)
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let fl = flags([
        ("seed", opt(&a.common.seed)),
        ("out", opt(&a.common.out)),
        ("checkpoint", opt(&a.checkpoint)),
        ("classes", opt(&a.classes)),
        ("steps", opt(&a.steps)),
        ("cfg_scale", opt(&a.cfg_scale)),
    ]);
    let mut run: SampleRun = resolve(a.common.config.as_deref(), fl)?;
    let model = load(required(&run.checkpoint, "checkpoint")?)?;
    let nc = model.config.num_classes;
    if run.classes.is_empty() {
        run.classes = (0..nc.min(8)).collect();
    }
    if let Some(&c) = run.classes.iter().find(|&&c| c >= nc) {
        return Err(Error::Input(format!("class {c} out of range for a {nc}-class model")).into());
    }
    prepare_out(&run.out, &run)?;
    let x = ddpm_sample_loop(&model, &NoiseSchedule::default(), &run.classes, run.steps, run.cfg_scale, run.seed)?;
    let s = model.config.input_size;
    let per = model.config.in_channels * s * s;
    let mut images = Vec::with_capacity(run.classes.len());
    for (k, &c) in run.classes.iter().enumerate() {
        let latent = Tensor::new([model.config.in_channels, s, s], x.data()[k * per..(k + 1) * per].to_vec())?;
        let img = latent_to_image(&latent)?;
        save_image(&img, &run.out.join(sample_file(c, run.seed)))?;
        images.push(img);
    }
    save_image(&montage(&images)?, &run.out.join(montage_file(run.seed)))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// profile

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileRun {
    pub seed: u64,
    pub out: PathBuf,
    pub suite: Option<String>,
    pub presets: Vec<String>,
    pub configs: Vec<NamedConfig>,
    pub iterations: usize,
    pub warmup: usize,
    pub batch: usize,
}

impl Default for ProfileRun {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/profile"),
            suite: None,
            presets: Vec::new(),
            configs: Vec::new(),
            iterations: 1,
            warmup: 0,
            batch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub name: String,
    pub report: Option<CostReport>,
    pub error: Option<String>,
}

pub const PROFILE_HEADER: [&str; 5] = ["name", "params_m", "activated_m", "gflops", "throughput_it_s"];

fn profile_one(name: &str, cfg: Result<ModelConfig>, run: &ProfileRun) -> Result<CostReport> {
    let cfg = cfg?;
    let mut report = cost_report(name, &cfg, None)?;
    if run.iterations > 0 {
        let model = DiTModel::new(cfg, run.seed)?;
        report.measured = Some(profile_model(&model, run.batch.max(1), run.iterations, run.warmup)?);
    }
    Ok(report)
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<()> {
    let fl = flags([
        ("seed", opt(&a.common.seed)),
        ("out", opt(&a.common.out)),
        ("suite", opt(&a.suite)),
        ("presets", (!a.preset.is_empty()).then(|| json!(a.preset))),
        ("iterations", opt(&a.iterations)),
        ("warmup", opt(&a.warmup)),
    ]);
    let run: ProfileRun = resolve(a.common.config.as_deref(), fl)?;
    prepare_out(&run.out, &run)?;
    let mut jobs: Vec<(String, Result<ModelConfig>)> = Vec::new();
    match run.suite.as_deref() {
        None => {}
        Some("presets") => jobs.extend(preset_suite().into_iter().map(|(n, c)| (n, Ok(c)))),
        Some(s) => return Err(usage(format!("unknown suite '{s}'"))),
    }
    for p in &run.presets {
        jobs.push((p.clone(), ModelConfig::from_name(p).map_err(Into::into)));
    }
    for nc in &run.configs {
        jobs.push((nc.name.clone(), Ok(nc.model.clone())));
    }
    let rows: Vec<ProfileRow> = jobs
        .into_iter()
        .map(|(name, cfg)| match profile_one(&name, cfg, &run) {
            Ok(r) => ProfileRow { name, report: Some(r), error: None },
            Err(e) => ProfileRow { name, report: None, error: Some(describe(&e)) },
        })
        .collect();
    write_profile(&run.out, &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(usage(format!("{failed} of {} configurations failed", rows.len())));
    }
    Ok(())
}

pub fn write_profile(out: &Path, rows: &[ProfileRow]) -> Result<()> {
    let ok: Vec<CostReport> = rows.iter().filter_map(|r| r.report.clone()).collect();
    let mut text = render_table(&ok);
    for r in rows.iter().filter(|r| r.error.is_some()) {
        text.push_str(&format!("{}: ERROR {}\n", r.name, r.error.as_deref().unwrap_or_default()));
    }
    fs::write(out.join("profile.txt"), &text)?;
    print!("{text}");
    write_json(&out.join("profile.json"), &rows)?;
    let mut w = csv::Writer::from_path(out.join("profile.csv"))?;
    w.write_record(PROFILE_HEADER)?;
    for r in rows {
        let cells = match &r.report {
            Some(rep) => [
                r.name.clone(),
                format!("{:.6}", rep.params_m()),
                format!("{:.6}", rep.activated_m()),
                format!("{:.6}", rep.gflops()),
                rep.measured.map_or(String::new(), |m| format!("{:.6}", m.it_per_s)),
            ],
            None => [r.name.clone(), String::new(), String::new(), String::new(), String::new()],
        };
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// prune / quantize

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneRun {
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub keep_heads: Option<usize>,
}

impl Default for PruneRun {
    fn default() -> Self {
        Self { seed: 0, out: PathBuf::from("runs/pruned"), checkpoint: None, keep_heads: None }
    }
}

pub fn cmd_prune(a: &PruneArgs) -> Result<()> {
    let fl = flags([
        ("seed", opt(&a.common.seed)),
        ("out", opt(&a.common.out)),
        ("checkpoint", opt(&a.checkpoint)),
        ("keep_heads", opt(&a.keep_heads)),
    ]);
    let run: PruneRun = resolve(a.common.config.as_deref(), fl)?;
    let k = *required(&run.keep_heads, "keep_heads")?;
    let model = load(required(&run.checkpoint, "checkpoint")?)?;
    let pruned = prune_heads(&model, k)?;
    prepare_out(&run.out, &run)?;
    save_checkpoint(&pruned, &run.out.join(MODEL_FILE))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeRun {
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub mode: QuantMode,
}

impl Default for QuantizeRun {
    fn default() -> Self {
        Self { seed: 0, out: PathBuf::from("runs/quantized"), checkpoint: None, mode: QuantMode::PerChannel }
    }
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let fl = flags([
        ("seed", opt(&a.common.seed)),
        ("out", opt(&a.common.out)),
        ("checkpoint", opt(&a.checkpoint)),
        ("mode", opt(&a.mode)),
    ]);
    let run: QuantizeRun = resolve(a.common.config.as_deref(), fl)?;
    let model = load(required(&run.checkpoint, "checkpoint")?)?;
    let q = quantize_model(&model, run.mode)?;
    prepare_out(&run.out, &run)?;
    save_checkpoint(&q, &run.out.join(MODEL_FILE))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareRun {
    pub seed: u64,
    pub out: PathBuf,
    pub baseline: Option<PathBuf>,
    pub candidate: Option<PathBuf>,
    pub tau: f64,
    pub feature_dim: usize,
}

impl Default for CompareRun {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/compare"),
            baseline: None,
            candidate: None,
            tau: DEFAULT_DIFF_TAU,
            feature_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDiff {
    pub file: String,
    pub deviating_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub pairs: Vec<PairDiff>,
    pub frechet: f64,
}

fn png_files(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("sample directory {} not found", dir.display())).into());
    }
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png") && n.starts_with("class"))
        .collect();
    names.sort();
    Ok(names)
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let fl = flags([
        ("seed", opt(&a.common.seed)),
        ("out", opt(&a.common.out)),
        ("baseline", opt(&a.baseline)),
        ("candidate", opt(&a.candidate)),
        ("tau", opt(&a.tau)),
    ]);
    let run: CompareRun = resolve(a.common.config.as_deref(), fl)?;
    let (da, db) = (required(&run.baseline, "baseline")?, required(&run.candidate, "candidate")?);
    let in_b = png_files(db)?;
    let shared: Vec<String> = png_files(da)?.into_iter().filter(|n| in_b.contains(n)).collect();
    if shared.is_empty() {
        return Err(Error::Input("no common sample files to compare".into()).into());
    }
    prepare_out(&run.out, &run)?;
    let mut pairs = Vec::new();
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    let mut proj: Option<FeatureProjector> = None;
    for name in &shared {
        let (ia, ib) = (load_image(&da.join(name))?, load_image(&db.join(name))?);
        let (overlay, frac) = image_diff(&ia, &ib, run.tau)?;
        save_image(&overlay, &run.out.join(format!("diff_{name}")))?;
        pairs.push(PairDiff { file: name.clone(), deviating_fraction: frac });
        let p = proj.get_or_insert_with(|| FeatureProjector::new(ia.numel(), run.feature_dim, run.seed));
        fa.push(p.project(&ia)?);
        fb.push(p.project(&ib)?);
    }
    let frechet = frechet_distance(&GaussianSummary::from_samples(&fa)?, &GaussianSummary::from_samples(&fb)?)?;
    let report = CompareReport { pairs, frechet };
    write_json(&run.out.join("compare.json"), &report)?;
    println!("pairs: {}  frechet: {:.6}", report.pairs.len(), report.frechet);
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataRun {
    pub seed: u64,
    pub out: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
}

impl Default for GenDataRun {
    fn default() -> Self {
        Self { seed: 0, out: PathBuf::from("data/synthetic"), classes: 8, per_class: 16, size: 32 }
    }
}

pub fn class_dir(class: usize) -> String {
    format!("class_{class:03}")
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let fl = flags([
        ("seed", opt(&a.common.seed)),
        ("out", opt(&a.common.out)),
        ("classes", opt(&a.classes)),
        ("per_class", opt(&a.per_class)),
        ("size", opt(&a.size)),
    ]);
    let run: GenDataRun = resolve(a.common.config.as_deref(), fl)?;
    if run.classes == 0 || run.per_class == 0 || run.size == 0 {
        return Err(usage("classes, per_class and size must be positive"));
    }
    prepare_out(&run.out, &run)?;
    let spec = SyntheticSpec { classes: run.classes, per_class: run.per_class, size: run.size, seed: run.seed };
    let mut count = vec![0usize; run.classes];
    for (img, k) in synthetic_images(&spec) {
        let dir = run.out.join(class_dir(k));
        fs::create_dir_all(&dir)?;
        save_image(&img.map(|v| (v + 1.0) / 2.0), &dir.join(format!("{:04}.png", count[k])))?;
        count[k] += 1;
    }
    Ok(())
}

