//! `haifit`: train, evaluate, run and serve sketch-to-image models.
//!
//! Precedence for training settings: built-in defaults, then the `--config`
//! TOML file, then command-line flags.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Tensor};
use clap::{Args, Parser, Subcommand};
use haifit_core::checkpoint::Checkpoint;
use haifit_core::config::TrainConfig;
use haifit_core::data::{load_manifest, load_pairs, split, write_synthetic, DatasetManifest, MANIFEST_FILE};
use haifit_core::extractor::{ConvStackExtractor, FeatureExtractor, Vgg16Extractor};
use haifit_core::imageio::normalize_rgb;
use haifit_core::inference::Model;
use haifit_core::metrics::{evaluate, MetricsReport};
use haifit_core::schedule::ResolutionSchedule;
use haifit_core::trainer::{progressive_train, LossContext, Outputs, TrainLog};
use haifit_server::{ServiceConfig, DEFAULT_MAX_BYTES, DEFAULT_MAX_IN_FLIGHT};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "haifit", version, about = "Sketch-to-image generation with a progressive generator pyramid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model progressively over the resolution schedule.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Generate one image from one sketch.
    Infer(InferArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
    /// Write synthetic sketch/photo pairs in the dataset layout.
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// Training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated resolutions, coarsest first, e.g. `64,128,256`.
    #[arg(long)]
    schedule: Option<String>,
    /// Disable the recurrent refinement branch.
    #[arg(long)]
    no_afrm: bool,
    /// Disable the cross-level skip connection between generator levels.
    #[arg(long)]
    no_cscm: bool,
}

impl ModelFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(text) = &self.schedule {
            config.schedule = ResolutionSchedule::parse(text)?;
        }
        if self.no_afrm {
            config.use_afrm = false;
        }
        if self.no_cscm {
            config.use_cscm = false;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct ExtractorFlag {
    /// VGG-16 weights (safetensors, torchvision `features.*` names). Without
    /// it a small fixed convolutional extractor is used.
    #[arg(long)]
    extractor: Option<PathBuf>,
}

impl ExtractorFlag {
    fn load(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match &self.extractor {
            Some(path) => Box::new(Vgg16Extractor::load(path, DType::F32)?),
            None => Box::new(ConvStackExtractor::test_profile(DType::F32)?),
        })
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    extractor: ExtractorFlag,
    #[arg(long)]
    data_root: PathBuf,
    /// Output directory for checkpoints, the resolved config and the log.
    #[arg(long)]
    out: PathBuf,
    /// Split the dataset with this many training pairs. Otherwise the split
    /// in `manifest.json` is used, or every pair when there is none.
    #[arg(long)]
    train_count: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    extractor: ExtractorFlag,
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report path; defaults to `eval.json` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sketch PNG.
    #[arg(long)]
    input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "HAIFIT_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Largest accepted request body.
    #[arg(long, default_value_t = DEFAULT_MAX_BYTES)]
    max_bytes: usize,
    /// Requests admitted for inference at once.
    #[arg(long, default_value_t = DEFAULT_MAX_IN_FLIGHT)]
    max_in_flight: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `manifest.json` with this many training pairs.
    #[arg(long)]
    train_count: Option<usize>,
}

/// Split stored in `manifest.json` if present, else every pair as training.
fn dataset(root: &Path) -> Result<DatasetManifest> {
    let scanned = load_manifest(root)?;
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(scanned);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let stored = DatasetManifest::from_json(&text)?;
    if stored.ids != scanned.ids {
        bail!("{} does not match the files under {}", path.display(), root.display());
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        ..stored
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.model.resolve()?;
    println!(
        "loss weights: l1={:.1} adv={:.1} style={:.1} per={:.1}",
        config.lambda_l1, config.lambda_adv, config.lambda_style, config.lambda_per
    );
    let mut manifest = dataset(&args.data_root)?;
    if let Some(n) = args.train_count {
        manifest = split(&manifest, n, config.seed)?;
    }
    if manifest.train.is_empty() {
        bail!("no training pairs under {}", args.data_root.display());
    }
    let finest = config.schedule.finest();
    let train = load_pairs(&manifest, &manifest.train, finest, DType::F32)?;
    let validation = load_pairs(&manifest, &manifest.test, finest, DType::F32)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.toml"), config.to_toml_string())?;
    let extractor = args.extractor.load()?;
    let ctx = LossContext {
        extractor: extractor.as_ref(),
    };
    let outputs = Outputs {
        dir: Some(args.out.clone()),
    };
    let mut log = TrainLog::jsonl(&args.out.join("train_log.jsonl"))?;
    let t = Instant::now();
    let outcome = progressive_train(config, &train, &validation, &ctx, &outputs, &mut log)?;
    let final_path = outputs.final_checkpoint().expect("output dir set");
    Checkpoint::from_state(&outcome.state)?.save(&final_path)?;
    let last = outcome.epochs.last().and_then(|e| e.validation_ssim);
    println!(
        "trained {} epochs in {:.1}s{}; checkpoint {}",
        outcome.epochs.len(),
        t.elapsed().as_secs_f64(),
        if outcome.early_stopped { " (early stop)" } else { "" },
        final_path.display()
    );
    if let Some(s) = last {
        println!("validation ssim {s:.4}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    #[serde(flatten)]
    metrics: MetricsReport,
    inference_ms_per_image: f64,
    fingerprint: String,
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    let manifest = dataset(&args.data_root)?;
    let ids = if manifest.test.is_empty() { &manifest.ids } else { &manifest.test };
    if ids.is_empty() {
        bail!("no pairs under {}", args.data_root.display());
    }
    let finest = model.schedule().finest();
    let out_res = model.output_resolution();
    let sketches = load_pairs(&manifest, ids, finest, DType::F32)?;
    let photos = load_pairs(&manifest, ids, out_res, DType::F32)?;
    let mut generated = Vec::with_capacity(ids.len());
    let mut elapsed = 0.0;
    for pair in &sketches {
        let sketch = haifit_core::imageio::denormalize(pair.sketch.tensor())?.remove(0);
        let t = Instant::now();
        let img = model.generate(&sketch)?;
        elapsed += t.elapsed().as_secs_f64();
        generated.push(normalize_rgb(&img, DType::F32)?.into_tensor());
    }
    let generated = Tensor::cat(&generated, 0)?;
    let reference = Tensor::cat(&photos.iter().map(|p| p.photo.tensor().clone()).collect::<Vec<_>>(), 0)?;
    let extractor = args.extractor.load()?;
    let report = EvalReport {
        metrics: evaluate(&generated, &reference, extractor.as_ref())?,
        inference_ms_per_image: elapsed * 1000.0 / ids.len() as f64,
        fingerprint: model.fingerprint().to_string(),
    };
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval.json")
    });
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    println!("{text}");
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    let bytes = std::fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let png = model.generate_png(&bytes)?;
    std::fs::write(&args.out, png).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        addr: SocketAddr::new(args.host, args.port),
        checkpoint: args.checkpoint,
        max_bytes: args.max_bytes,
        max_in_flight: args.max_in_flight,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(haifit_server::serve(config))?;
    Ok(())
}

fn synth_data(args: SynthArgs) -> Result<()> {
    let mut manifest = write_synthetic(&args.out, args.count, args.resolution, args.seed)?;
    if let Some(n) = args.train_count {
        manifest = split(&manifest, n, args.seed)?;
        manifest.save()?;
    }
    println!("wrote {} pairs to {}", manifest.ids.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Serve(a) => serve(a),
        Command::SynthData(a) => synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
