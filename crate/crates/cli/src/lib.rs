//! The `stvae` command line: corpus generation, both training phases,
//! single-style stylization, multi-style blending, benchmarking and serving.

use std::ffi::OsString;
use std::fmt;
use std::io::ErrorKind;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stvae_core::bench::{run_bench, DEFAULT_RUNS, DEFAULT_SIDES};
use stvae_core::corpus::{generate, CorpusKind};
use stvae_core::iae::IaeArchitecture;
use stvae_core::imageio::{from_tensor, load_image, save_image, Image};
use stvae_core::model::{stylize_closed_form, LatentMode, VltConfig};
use stvae_core::trainer::{
    crop_to_multiple, load_checkpoint, save_checkpoint, train_iae, train_vlt, LossParts, LossWeights,
    TrainConfig,
};
use stvae_core::variation::{BlendWeights, WEIGHT_SUM_TOL};
use stvae_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const MAX_STYLES: usize = 8;
pub const SWEEP_FRAMES: usize = 11;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Io { .. }
                | Error::Checkpoint { .. }
                | Error::Manifest(_)
                | Error::ArchitectureMismatch { .. }
                | Error::Decode { .. }
                | Error::UnsupportedFormat(_) => EXIT_IO,
                Error::Numerical(_) | Error::Singular(_) => EXIT_NUMERICAL,
                _ => EXIT_USAGE,
            },
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.code(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::io(path, e))
}

#[derive(Parser, Debug)]
#[command(name = "stvae", version, about = "Style transfer and multi-style blending in a variational latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural content or style corpus as PNG files.
    MakeCorpus(MakeCorpusArgs),
    /// Train the image autoencoder on reconstruction.
    TrainIae(TrainIaeArgs),
    /// Train the transform and variation modules against a frozen autoencoder.
    TrainVlt(TrainVltArgs),
    /// Stylize content image(s) with style image(s); globs give every pair.
    Stylize(StylizeArgs),
    /// Blend several styles with convex weights, or sweep between two.
    Blend(BlendArgs),
    /// Time stylization at several resolutions and print JSON.
    Bench(BenchArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    Content,
    Style,
}

#[derive(Args, Debug)]
pub struct MakeCorpusArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss log path (default: `<out>` with extension `loss.json`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct TrainIaeArgs {
    /// Directory of PNG/PPM training images.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct TrainVltArgs {
    /// Checkpoint from `train-iae`.
    #[arg(long)]
    pub iae: PathBuf,
    #[arg(long)]
    pub content_corpus: PathBuf,
    #[arg(long)]
    pub style_corpus: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub style_order: Option<u32>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub reduced_channels: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct SamplingFlags {
    /// Use latent means instead of sampling.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SamplingFlags {
    fn mode(&self, blend_first: bool) -> LatentMode {
        match (self.deterministic, blend_first) {
            (true, _) => LatentMode::Deterministic,
            (false, false) => LatentMode::SampleThenBlend { seed: self.seed },
            (false, true) => LatentMode::BlendThenSample { seed: self.seed },
        }
    }
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Content image path or glob.
    #[arg(long)]
    pub content: String,
    /// Style image path or glob.
    #[arg(long)]
    pub style: String,
    /// Output file for a single pair, otherwise a directory receiving
    /// `{content}_{style}.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Training-free whitening/coloring on the autoencoder features.
    #[arg(long)]
    pub closed_form: bool,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Args, Debug)]
pub struct BlendArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    /// Repeat once per style.
    #[arg(long = "style", required = true)]
    pub styles: Vec<PathBuf>,
    /// Comma-separated, one per style; renormalized with a warning.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub weights: Vec<f64>,
    /// Output PNG, or the frame directory with `--sweep`.
    #[arg(long)]
    pub out: PathBuf,
    /// Eleven frames from the first style to the second.
    #[arg(long)]
    pub sweep: bool,
    /// Sample once from the blended distribution instead of blending samples.
    #[arg(long)]
    pub sample_after_blend: bool,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIDES)]
    pub sides: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
    #[arg(long, default_value_t = 8787)]
    pub port: u16,
    /// Directory served at `/` (the built web client).
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Optional fields of a JSON training config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub clip_norm: Option<f64>,
    pub crop_size: Option<usize>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub style_order: Option<u32>,
    pub latent_dim: Option<usize>,
    pub reduced_channels: Option<usize>,
    pub transform_hidden: Option<usize>,
    pub variation_hidden: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    fn train_config(&self, flags: &TrainFlags) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        macro_rules! pick {
            ($($field:ident => $target:expr),*) => {$(
                if let Some(v) = self.$field { $target = v; }
            )*};
        }
        pick!(steps => cfg.steps, seed => cfg.seed, batch_size => cfg.batch_size, lr => cfg.adam.lr,
              clip_norm => cfg.clip_norm, crop_size => cfg.crop_size);
        cfg.steps = flags.steps.unwrap_or(cfg.steps);
        cfg.seed = flags.seed.unwrap_or(cfg.seed);
        cfg.batch_size = flags.batch_size.unwrap_or(cfg.batch_size);
        cfg.adam.lr = flags.lr.unwrap_or(cfg.adam.lr);
        cfg.crop_size = flags.crop_size.unwrap_or(cfg.crop_size);
        cfg
    }
}

#[derive(Serialize)]
struct LossLog<S> {
    phase: &'static str,
    seed: u64,
    steps: Vec<S>,
}

#[derive(Serialize)]
struct IaeStep {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct VltStep {
    step: usize,
    total: f64,
    content: f64,
    style: f64,
    kl: f64,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("error_code=usage");
                return EXIT_USAGE;
            }
            return EXIT_OK;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("error_code={}", e.code());
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::MakeCorpus(a) => cmd_make_corpus(&a),
        Command::TrainIae(a) => cmd_train_iae(&a),
        Command::TrainVlt(a) => cmd_train_vlt(&a),
        Command::Stylize(a) => cmd_stylize(&a),
        Command::Blend(a) => cmd_blend(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// PNG/PPM files of a directory in name order.
pub fn load_corpus(dir: &Path) -> CliResult<Vec<Image>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(io_err(dir, std::io::Error::new(ErrorKind::NotFound, "no .png or .ppm images")));
    }
    Ok(paths.iter().map(load_image).collect::<Result<_, _>>()?)
}

fn expand(pattern: &str) -> CliResult<Vec<PathBuf>> {
    if !pattern.contains(['*', '?', '[']) {
        return Ok(vec![PathBuf::from(pattern)]);
    }
    let mut paths = glob::glob(pattern)
        .map_err(|e| usage(format!("bad glob {pattern:?}: {e}")))?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file())
        .collect::<Vec<_>>();
    paths.sort();
    if paths.is_empty() {
        return Err(io_err(Path::new(pattern), std::io::Error::new(ErrorKind::NotFound, "no files match")));
    }
    Ok(paths)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Loads an image and crops it to the autoencoder's size multiple.
fn load_for(path: &Path, multiple: usize) -> CliResult<Image> {
    let img = load_image(path)?;
    let fitted = crop_to_multiple(&img, multiple)?;
    if fitted.width() != img.width() || fitted.height() != img.height() {
        eprintln!(
            "warning: {} cropped from {}×{} to {}×{}",
            path.display(),
            img.width(),
            img.height(),
            fitted.width(),
            fitted.height()
        );
    }
    Ok(fitted)
}

fn log_path(flags: &TrainFlags) -> PathBuf {
    flags.log.clone().unwrap_or_else(|| flags.out.with_extension("loss.json"))
}

pub fn cmd_make_corpus(a: &MakeCorpusArgs) -> CliResult {
    let kind = match a.kind {
        Kind::Content => CorpusKind::Content,
        Kind::Style => CorpusKind::Style,
    };
    let images = generate(kind, a.count, a.size, a.seed)?;
    create_dir(&a.out)?;
    let prefix = match a.kind {
        Kind::Content => "content",
        Kind::Style => "style",
    };
    for (i, img) in images.iter().enumerate() {
        save_image(img, a.out.join(format!("{prefix}_{i:03}.png")))?;
    }
    eprintln!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}

pub fn cmd_train_iae(a: &TrainIaeArgs) -> CliResult {
    let file = a.train.config.as_deref().map(ConfigFile::load).transpose()?.unwrap_or_default();
    let cfg = file.train_config(&a.train);
    let corpus = load_corpus(&a.corpus)?;
    let mut steps = Vec::with_capacity(cfg.steps);
    let quiet = a.train.quiet;
    let ckpt = train_iae(&corpus, IaeArchitecture::desk(), &cfg, &mut |step, loss| {
        if !quiet && (step % 100 == 0 || step + 1 == cfg.steps) {
            eprintln!("iae step {step} loss {loss:.5}");
        }
        steps.push(IaeStep { step, loss });
    })?;
    save_checkpoint(&ckpt, &a.train.out)?;
    write_json(
        &log_path(&a.train),
        &LossLog {
            phase: "iae",
            seed: cfg.seed,
            steps,
        },
    )
}

pub fn cmd_train_vlt(a: &TrainVltArgs) -> CliResult {
    let file = a.train.config.as_deref().map(ConfigFile::load).transpose()?.unwrap_or_default();
    let cfg = file.train_config(&a.train);
    let defaults = LossWeights::default();
    let weights = LossWeights {
        lambda_style: a.lambda.or(file.lambda).unwrap_or(defaults.lambda_style),
        beta_kl: a.beta.or(file.beta).unwrap_or(defaults.beta_kl),
        style_order_l: a.style_order.or(file.style_order).unwrap_or(defaults.style_order_l),
    };
    let d = VltConfig::default();
    let vlt_cfg = VltConfig {
        reduced_channels: a.reduced_channels.or(file.reduced_channels).unwrap_or(d.reduced_channels),
        latent_dim: a.latent_dim.or(file.latent_dim).unwrap_or(d.latent_dim),
        transform_hidden: file.transform_hidden.unwrap_or(d.transform_hidden),
        variation_hidden: file.variation_hidden.unwrap_or(d.variation_hidden),
    };
    let iae = load_checkpoint(&a.iae)?;
    let content = load_corpus(&a.content_corpus)?;
    let style = load_corpus(&a.style_corpus)?;
    let mut steps = Vec::with_capacity(cfg.steps);
    let quiet = a.train.quiet;
    let ckpt = train_vlt(&iae, &content, &style, vlt_cfg, &weights, &cfg, &mut |step, p: &LossParts| {
        if !quiet && (step % 100 == 0 || step + 1 == cfg.steps) {
            eprintln!(
                "vlt step {step} total {:.5} content {:.5} style {:.5} kl {:.4}",
                p.total, p.content, p.style, p.kl
            );
        }
        steps.push(VltStep {
            step,
            total: p.total,
            content: p.content,
            style: p.style,
            kl: p.kl,
        });
    })?;
    save_checkpoint(&ckpt, &a.train.out)?;
    write_json(
        &log_path(&a.train),
        &LossLog {
            phase: "vlt",
            seed: cfg.seed,
            steps,
        },
    )
}

pub fn cmd_stylize(a: &StylizeArgs) -> CliResult {
    let contents = expand(&a.content)?;
    let styles = expand(&a.style)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let single = contents.len() * styles.len() == 1 && !a.out.is_dir();
    if !single {
        create_dir(&a.out)?;
    }
    let target = |c: &Path, s: &Path| {
        if single {
            a.out.clone()
        } else {
            a.out.join(format!("{}_{}.png", stem(c), stem(s)))
        }
    };
    if a.closed_form {
        let iae = ckpt.iae()?;
        let m = iae.architecture().downsample();
        let style_imgs = styles.iter().map(|s| load_for(s, m)).collect::<CliResult<Vec<_>>>()?;
        for c in &contents {
            let content = load_for(c, m)?;
            for (s, style) in styles.iter().zip(&style_imgs) {
                save_image(&stylize_closed_form(&iae, &content, style)?, target(c, s))?;
            }
        }
        return Ok(());
    }
    let model = ckpt.model()?;
    let m = model.iae.architecture().downsample();
    let mode = a.sampling.mode(false);
    let encoded = styles
        .iter()
        .map(|s| Ok(model.encode_style_image(&load_for(s, m)?)?))
        .collect::<CliResult<Vec<_>>>()?;
    for c in &contents {
        let feat = model.features(&load_for(c, m)?)?;
        for (s, enc) in styles.iter().zip(&encoded) {
            save_image(&from_tensor(&model.stylize_encoded(&feat, enc, mode)?)?, target(c, s))?;
        }
    }
    Ok(())
}

/// Validates weights against the style count, renormalizing with a warning.
pub fn blend_weights(weights: &[f64], styles: usize) -> CliResult<BlendWeights> {
    if weights.is_empty() && styles == 1 {
        return Ok(BlendWeights::single());
    }
    if weights.len() != styles {
        return Err(usage(format!("{} weights given for {styles} styles", weights.len())));
    }
    let sum: f64 = weights.iter().sum();
    let w = BlendWeights::normalized(weights.to_vec())?;
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        eprintln!("warning: weights sum to {sum}; renormalized to {:?}", w.as_slice());
    }
    Ok(w)
}

pub fn cmd_blend(a: &BlendArgs) -> CliResult {
    if a.styles.len() > MAX_STYLES {
        return Err(usage(format!("at most {MAX_STYLES} styles, got {}", a.styles.len())));
    }
    if a.sweep && a.styles.len() != 2 {
        return Err(usage("--sweep needs exactly two styles"));
    }
    let weights = if a.sweep {
        None
    } else {
        Some(blend_weights(&a.weights, a.styles.len())?)
    };
    let model = load_checkpoint(&a.ckpt)?.model()?;
    let m = model.iae.architecture().downsample();
    let content = load_for(&a.content, m)?;
    let styles = a.styles.iter().map(|s| load_for(s, m)).collect::<CliResult<Vec<_>>>()?;
    let mode = a.sampling.mode(a.sample_after_blend);
    match weights {
        Some(w) => save_image(&model.blend(&content, &styles, &w, mode)?, &a.out)?,
        None => {
            create_dir(&a.out)?;
            let frames = model.sweep(&content, &styles[0], &styles[1], mode)?;
            debug_assert_eq!(frames.len(), SWEEP_FRAMES);
            for (i, f) in frames.iter().enumerate() {
                save_image(f, a.out.join(format!("frame_{i:02}.png")))?;
            }
        }
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult {
    let model = load_checkpoint(&a.ckpt)?.model()?;
    let m = model.iae.architecture().downsample();
    if let Some(bad) = a.sides.iter().find(|&&s| s == 0 || s % m != 0) {
        return Err(usage(format!("side {bad} is not a positive multiple of {m}")));
    }
    let report = run_bench(&model, &a.sides, a.runs, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn cmd_serve(a: &ServeArgs) -> CliResult {
    let state = match &a.ckpt {
        Some(p) => stvae_service::AppState::with_checkpoint(&load_checkpoint(p)?)?,
        None => stvae_service::AppState::new(),
    };
    let addr = SocketAddr::new(a.bind, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| io_err(Path::new("tokio runtime"), e))?;
    eprintln!("listening on http://{addr}");
    rt.block_on(stvae_service::serve(Arc::new(state), addr, a.static_dir.clone()))
        .map_err(|e| io_err(Path::new(&addr.to_string()), e))
}
