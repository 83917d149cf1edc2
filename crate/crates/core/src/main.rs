use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use metasr::checkpoint;
use metasr::config::RunConfig;
use metasr::data::ImagePlane;
use metasr::meta_upscale::ScaleFactor;
use metasr::model::{Backend, MetaSr, ModelConfig, Preset};
use metasr::workflows::{self, EvalOptions, TrainLimits};
use metasr::{Error, Result};

#[derive(Parser)]
#[command(name = "metasr", version, about = "Arbitrary-scale single-image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Upscale one image by one or more scale factors.
    Sr(SrArgs),
    /// PSNR/SSIM table against bicubic on a directory of HR images.
    Eval(EvalArgs),
    /// Write bicubic-downscaled copies of a directory of images.
    Degrade(DegradeArgs),
    /// Time feature learning, weight prediction and feature mapping.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    /// Single-threaded, synchronous batch generation.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop after this many minutes and write a checkpoint.
    #[arg(long)]
    time_limit_min: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Log the loss of every N-th step.
    #[arg(long, default_value_t = 0)]
    log_every: u64,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long = "scale", required = true, allow_negative_numbers = true)]
    scales: Vec<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Without a checkpoint only the bicubic column is computed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "scale", required = true, allow_negative_numbers = true)]
    scales: Vec<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Score stored SR images (same relative paths) instead of running a model.
    #[arg(long)]
    sr_dir: Option<PathBuf>,
    /// Read the shave policy from a run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long = "scale", required = true, allow_negative_numbers = true)]
    scales: Vec<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Without a checkpoint a randomly initialized model is timed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Synthetic input size, `HxW`.
    #[arg(long, default_value = "100x100")]
    size: String,
    #[arg(long = "scale", required = true, allow_negative_numbers = true)]
    scales: Vec<f64>,
    /// Print one JSON object per row instead of a table.
    #[arg(long)]
    json: bool,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.model.preset {
        cfg.model.preset = v;
    }
    if let Some(v) = a.model.backend {
        cfg.model.backend = v;
    }
    if let Some(v) = a.model.seed {
        cfg.train.seed = v;
    }
    cfg.train.deterministic |= a.deterministic;
    if a.train_dir.is_some() {
        cfg.data.train_dir = a.train_dir;
    }
    if a.val_dir.is_some() {
        cfg.data.val_dir = a.val_dir;
    }
    if let Some(v) = a.output_dir {
        cfg.train.output_dir = v;
    }
    if a.resume.is_some() {
        cfg.train.resume = a.resume;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.train.steps_per_epoch = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    let limits = TrainLimits {
        time_limit: a.time_limit_min.map(|m| Duration::from_secs_f64(m * 60.0)),
        max_steps: a.max_steps,
        log_every: a.log_every,
    };
    let report = workflows::cmd_train(&cfg, &limits)?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps (last loss {last:.5}); checkpoint {}",
        report.steps,
        report.checkpoint.display()
    );
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("size must look like 100x100, got '{s}'"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => checkpoint::load_model::<f32>(p)?,
        None => {
            let cfg = ModelConfig::preset(
                a.model.preset.unwrap_or(Preset::Desk),
                a.model.backend.unwrap_or(Backend::Meta),
            );
            MetaSr::init(cfg, a.model.seed.unwrap_or(0))?
        }
    };
    let img = match &a.input {
        Some(p) => ImagePlane::load(p)?,
        None => {
            let (h, w) = parse_size(&a.size)?;
            workflows::noise_image(h, w, a.model.seed.unwrap_or(0))?
        }
    };
    let (rows, stats) = workflows::cmd_bench(&model, &img, &a.scales)?;
    if a.json {
        for r in &rows {
            println!("{}", serde_json::to_string(r).expect("plain struct"));
        }
        println!("{}", serde_json::json!({"cache_hits": stats.hits, "cache_misses": stats.misses}));
    } else {
        println!(
            "{:>6}  {:>10}  {:>10}  {:>10}  {:>10}  {:>7}  {:>6}  {:>5}",
            "scale", "FL ms", "WP ms", "map ms", "total ms", "WP %", "groups", "cache"
        );
        for r in &rows {
            println!(
                "{:>6.2}  {:>10.2}  {:>10.3}  {:>10.2}  {:>10.2}  {:>6.2}%  {:>6}  {:>5}",
                r.scale,
                r.feature_learning_ms,
                r.weight_prediction_ms,
                r.feature_mapping_ms,
                r.total_ms,
                100.0 * r.weight_prediction_ms / r.total_ms,
                r.filter_groups,
                if r.cache_hit { "hit" } else { "miss" }
            );
        }
        println!("filter cache: {} hits, {} misses", stats.hits, stats.misses);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let shave = match &a.config {
        Some(p) => RunConfig::load(p)?.eval.shave,
        None => Default::default(),
    };
    if let Some(sr_dir) = &a.sr_dir {
        println!("scale,psnr,ssim");
        for r in workflows::parse_scales(&a.scales)? {
            let (p, s) = workflows::evaluate_pairs(sr_dir, &a.dataset, r, &shave)?;
            println!("{},{p},{s}", r.value());
        }
        return Ok(());
    }
    let rows = workflows::cmd_eval(&EvalOptions {
        checkpoint: a.checkpoint.as_deref(),
        dataset: &a.dataset,
        scales: &a.scales,
        shave,
        csv: a.csv.as_deref(),
    })?;
    print!("{}", workflows::format_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sr(a) => workflows::cmd_sr(&a.checkpoint, &a.input, &a.output, &a.scales).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Eval(a) => eval(a),
        Command::Degrade(a) => workflows::cmd_degrade(&a.input, &a.output, &a.scales).map(|paths| {
            println!("wrote {} images", paths.len());
        }),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("METASR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    // Validate scales up front so a bad value is a usage error, not an I/O one.
    let scales: &[f64] = match &cli.command {
        Command::Sr(a) => &a.scales,
        Command::Eval(a) => &a.scales,
        Command::Degrade(a) => &a.scales,
        Command::Bench(a) => &a.scales,
        Command::Train(_) => &[],
    };
    let checked = scales.iter().try_for_each(|&r| ScaleFactor::new(r).map(|_| ()));
    match checked.and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
