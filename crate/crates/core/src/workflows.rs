//! End-to-end commands behind the `metasr` binary.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::config::{RunConfig, ShavePolicy};
use crate::data::bicubic::{bicubic_resize, bicubic_resize_to};
use crate::data::image::{ColorSpace, ImagePlane};
use crate::data::pipeline::{BatchSource, BatchSpec};
use crate::error::{Error, Result};
use crate::meta_upscale::ScaleFactor;
use crate::metrics::{align_pair, psnr_y, ssim_y};
use crate::model::{CacheStats, MetaSr, StageTimes};
use crate::train::{Schedule, Trainer};

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn collect_pngs(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(root, &p, out)?;
        } else if is_png(&p) {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
        }
    }
    Ok(())
}

/// Every PNG under `dir`, as paths relative to `dir`, in sorted order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    collect_pngs(dir, dir, &mut out)?;
    Ok(out)
}

/// Loads every readable PNG under `dir`; unreadable files are skipped with
/// a warning.
pub fn load_images(dir: &Path) -> Result<Vec<(PathBuf, ImagePlane)>> {
    let mut out = Vec::new();
    for rel in list_images(dir)? {
        match ImagePlane::load(&dir.join(&rel)) {
            Ok(img) => out.push((rel, img)),
            Err(e) => log::warn!("skipping {}: {e}", rel.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no readable PNG images under {}", dir.display())));
    }
    Ok(out)
}

/// Appends one JSON object per line.
pub struct JsonLog {
    file: Option<std::fs::File>,
}

impl JsonLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JsonLog { file: Some(file) })
    }

    pub fn disabled() -> Self {
        JsonLog { file: None }
    }

    pub fn record(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{value}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Largest crop whose sides are multiples of the scale's numerator, so that
/// downscaling and upscaling again lands on the same grid. Scales whose
/// numerator is large relative to the image are left uncropped.
pub fn modcrop(img: &ImagePlane, r: ScaleFactor) -> Result<ImagePlane> {
    let Some((p, _)) = r.ratio() else {
        return Ok(img.clone());
    };
    let p = p as usize;
    let (h, w) = (img.height(), img.width());
    if p == 1 || 4 * p > h.min(w) {
        return Ok(img.clone());
    }
    img.crop(0, 0, h - h % p, w - w % p)
}

/// The low-resolution input for evaluating at scale `r`: a bicubic
/// downscale rounded to 8 bits, as if stored as PNG.
pub fn degrade(hr: &ImagePlane, r: ScaleFactor) -> Result<ImagePlane> {
    Ok(bicubic_resize(hr, r.inverse())?.quantize())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub scale: f64,
    pub images: usize,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    pub model_psnr: Option<f64>,
    pub model_ssim: Option<f64>,
}

struct PairScore {
    bicubic: (f64, f64),
    model: Option<(f64, f64)>,
}

fn score(sr: &ImagePlane, hr: &ImagePlane, shave: usize) -> Result<(f64, f64)> {
    let (sr, hr) = align_pair(sr, hr)?;
    Ok((psnr_y(&sr, &hr, shave)?, ssim_y(&sr, &hr, shave)?))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Mean Y-PSNR/SSIM of bicubic and (optionally) the model on `hr_images`.
pub fn evaluate<T: crate::Element>(
    model: Option<&MetaSr<T>>,
    hr_images: &[ImagePlane],
    r: ScaleFactor,
    shave: &ShavePolicy,
) -> Result<EvalRow> {
    if hr_images.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let px = shave.pixels(r.value());
    let scores: Vec<Result<PairScore>> = hr_images
        .par_iter()
        .map(|img| {
            let hr = modcrop(img, r)?;
            let lr = degrade(&hr, r)?;
            let bic = bicubic_resize_to(&lr, r.output_len(lr.height()), r.output_len(lr.width()), r.value())?;
            let bicubic = score(&bic, &hr, px)?;
            let model = match model {
                Some(m) => Some(score(&m.upscale(&lr, r)?, &hr, px)?),
                None => None,
            };
            Ok(PairScore { bicubic, model })
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let model_mean = |f: fn(&(f64, f64)) -> f64| {
        model.map(|_| mean(scores.iter().map(|s| f(s.model.as_ref().expect("model scored")))))
    };
    Ok(EvalRow {
        scale: r.value(),
        images: scores.len(),
        bicubic_psnr: mean(scores.iter().map(|s| s.bicubic.0)),
        bicubic_ssim: mean(scores.iter().map(|s| s.bicubic.1)),
        model_psnr: model_mean(|s| s.0),
        model_ssim: model_mean(|s| s.1),
    })
}

/// Scores precomputed SR images against HR images with matching relative
/// paths.
pub fn evaluate_pairs(sr_dir: &Path, hr_dir: &Path, r: ScaleFactor, shave: &ShavePolicy) -> Result<(f64, f64)> {
    let hr = load_images(hr_dir)?;
    let px = shave.pixels(r.value());
    let scores: Vec<Result<(f64, f64)>> = hr
        .par_iter()
        .map(|(rel, h)| score(&ImagePlane::load(&sr_dir.join(rel))?, h, px))
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((mean(scores.iter().map(|s| s.0)), mean(scores.iter().map(|s| s.1))))
}

pub fn format_table(rows: &[EvalRow]) -> String {
    let mut s = format!(
        "{:>6}  {:>6}  {:>12}  {:>12}  {:>12}  {:>12}\n",
        "scale", "images", "bicubic PSNR", "bicubic SSIM", "model PSNR", "model SSIM"
    );
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    for r in rows {
        s.push_str(&format!(
            "{:>6.2}  {:>6}  {:>12.2}  {:>12.4}  {:>12}  {:>12}\n",
            r.scale,
            r.images,
            r.bicubic_psnr,
            r.bicubic_ssim,
            opt(r.model_psnr, 2),
            opt(r.model_ssim, 4)
        ));
    }
    s
}

pub fn format_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("scale,images,bicubic_psnr,bicubic_ssim,model_psnr,model_ssim\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scale,
            r.images,
            r.bicubic_psnr,
            r.bicubic_ssim,
            opt(r.model_psnr),
            opt(r.model_ssim)
        ));
    }
    s
}

pub struct EvalOptions<'a> {
    pub checkpoint: Option<&'a Path>,
    pub dataset: &'a Path,
    pub scales: &'a [f64],
    pub shave: ShavePolicy,
    pub csv: Option<&'a Path>,
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<Vec<EvalRow>> {
    let scales = parse_scales(opts.scales)?;
    let model = opts.checkpoint.map(checkpoint::load_model::<f32>).transpose()?;
    let images: Vec<ImagePlane> = load_images(opts.dataset)?.into_iter().map(|(_, i)| i).collect();
    let rows = scales
        .iter()
        .map(|&r| evaluate(model.as_ref(), &images, r, &opts.shave))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = opts.csv {
        write_file(path, format_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_scales(scales: &[f64]) -> Result<Vec<ScaleFactor>> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("at least one --scale is required".into()));
    }
    scales.iter().map(|&r| ScaleFactor::new(r)).collect()
}

/// `name_x2.5.png` style suffix.
pub fn scale_suffix(r: ScaleFactor) -> String {
    format!("x{}", r.value())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    path.with_file_name(format!("{stem}_{suffix}.png"))
}

/// Upscales `input` at every scale. With one scale the output goes to
/// `output` as given; with several, each file gets an `_x<r>` suffix.
pub fn cmd_sr(checkpoint: &Path, input: &Path, output: &Path, scales: &[f64]) -> Result<Vec<PathBuf>> {
    let scales = parse_scales(scales)?;
    let model = checkpoint::load_model::<f32>(checkpoint)?;
    let img = ImagePlane::load(input)?;
    let mut written = Vec::new();
    for &r in &scales {
        let out = model.upscale(&img, r)?;
        let path = if scales.len() == 1 {
            output.to_path_buf()
        } else {
            with_suffix(output, &scale_suffix(r))
        };
        out.save_png(&path)?;
        log::info!("{} -> {} ({}x{})", input.display(), path.display(), out.height(), out.width());
        written.push(path);
    }
    Ok(written)
}

/// Writes bicubic-downscaled copies of every PNG under `input`, mirroring
/// the directory tree under `output`.
pub fn cmd_degrade(input: &Path, output: &Path, scales: &[f64]) -> Result<Vec<PathBuf>> {
    let scales = parse_scales(scales)?;
    let mut written = Vec::new();
    for rel in list_images(input)? {
        let img = match ImagePlane::load(&input.join(&rel)) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", rel.display());
                continue;
            }
        };
        for &r in &scales {
            let lr = degrade(&img, r)?;
            let path = with_suffix(&output.join(&rel), &scale_suffix(r));
            lr.save_png(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub scale: f64,
    pub feature_learning_ms: f64,
    pub weight_prediction_ms: f64,
    pub feature_mapping_ms: f64,
    pub total_ms: f64,
    pub filter_groups: usize,
    pub cache_hit: bool,
}

impl From<(f64, StageTimes)> for BenchRow {
    fn from((scale, t): (f64, StageTimes)) -> Self {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        BenchRow {
            scale,
            feature_learning_ms: ms(t.feature_learning),
            weight_prediction_ms: ms(t.weight_prediction),
            feature_mapping_ms: ms(t.feature_mapping),
            total_ms: ms(t.total),
            filter_groups: t.filter_groups,
            cache_hit: t.cache_hit,
        }
    }
}

/// Uniform noise image, used when benchmarking without an input file.
pub fn noise_image(h: usize, w: usize, seed: u64) -> Result<ImagePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImagePlane::new(h, w, ColorSpace::Rgb, px)
}

/// Times one inference per listed scale, in order. Repeating a scale shows
/// the effect of the filter cache.
pub fn cmd_bench(model: &MetaSr<f32>, img: &ImagePlane, scales: &[f64]) -> Result<(Vec<BenchRow>, CacheStats)> {
    let scales = parse_scales(scales)?;
    let rows = scales
        .iter()
        .map(|&r| model.upscale_timed(img, r).map(|(_, t)| BenchRow::from((r.value(), t))))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, model.cache_stats()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub validation: Vec<EvalRow>,
    pub stopped_early: bool,
}

/// Extra knobs for [`cmd_train`] that do not belong in a config file.
#[derive(Clone, Debug, Default)]
pub struct TrainLimits {
    /// Stop (and checkpoint) once this much wall time has passed.
    pub time_limit: Option<Duration>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    /// Write a `step` log record every this many steps (0 disables them).
    pub log_every: u64,
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.train.output_dir.join("checkpoint.msr")
}

pub fn cmd_train(cfg: &RunConfig, limits: &TrainLimits) -> Result<TrainReport> {
    cfg.validate(true)?;
    let t = &cfg.train;
    let train_dir = cfg.data.train_dir.as_ref().expect("validated");
    let images: Vec<ImagePlane> = load_images(train_dir)?.into_iter().map(|(_, i)| i).collect();
    let val: Vec<ImagePlane> = match &cfg.data.val_dir {
        Some(d) => load_images(d)?.into_iter().map(|(_, i)| i).collect(),
        None => Vec::new(),
    };
    let val_scales = parse_scales(&t.val_scales)?;
    let schedule = Schedule {
        base_lr: t.learning_rate,
        halve_every: t.halve_every,
        steps_per_epoch: t.steps_per_epoch,
    };
    let mut trainer = match &t.resume {
        Some(path) => {
            let ck = checkpoint::load::<f32>(path)?;
            let adam = ck
                .adam
                .clone()
                .ok_or_else(|| Error::Checkpoint {
                    path: path.clone(),
                    reason: "no optimizer state to resume from".into(),
                })?;
            let meta = ck.meta.clone();
            let model = ck.into_model().map_err(|e| Error::Checkpoint {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if model.config != cfg.model_config() {
                log::warn!("resuming with the checkpoint's architecture, which differs from the configuration");
            }
            Trainer::resume(model, adam, schedule, &meta)?
        }
        None => Trainer::new(MetaSr::init(cfg.model_config(), t.seed)?, schedule, t.seed)?,
    };
    trainer.sequential = t.deterministic;
    let source = BatchSource::new(
        images,
        trainer.seed,
        BatchSpec {
            batch_size: t.batch_size,
            lr_patch: t.patch_size,
        },
    )?;

    let mut log = JsonLog::open(&t.output_dir.join("train.jsonl"))?;
    let ck_path = checkpoint_path(cfg);
    let total = (t.epochs * t.steps_per_epoch) as u64;
    let end = limits.max_steps.map_or(total, |m| m.min(total));
    let start = Instant::now();
    let mut report = TrainReport {
        steps: 0,
        losses: Vec::new(),
        checkpoint: ck_path.clone(),
        validation: Vec::new(),
        stopped_early: false,
    };

    let prefetch = (!t.deterministic && t.prefetch > 0 && trainer.step < end)
        .then(|| source.spawn(trainer.step, end, t.prefetch));
    let mut epoch_loss = (0.0, 0u64);
    while trainer.step < end {
        let batch = match &prefetch {
            Some((rx, _)) => rx
                .recv()
                .map_err(|_| Error::Dataset("batch producer stopped".into()))??,
            None => source.batch(trainer.step)?,
        };
        let loss = trainer.train_step(&batch)?;
        report.losses.push(loss);
        report.steps += 1;
        epoch_loss = (epoch_loss.0 + loss, epoch_loss.1 + 1);
        let step = trainer.step;
        if limits.log_every > 0 && step % limits.log_every == 0 {
            log.record(json!({"event": "step", "step": step, "loss": loss, "scale": batch.scale.value()}))?;
        }
        let timed_out = limits.time_limit.is_some_and(|l| start.elapsed() >= l);
        let epoch_done = step % t.steps_per_epoch as u64 == 0;
        if epoch_done || timed_out || step == end {
            let epoch = (step - 1) / t.steps_per_epoch as u64;
            log.record(json!({
                "event": "epoch",
                "epoch": epoch,
                "step": step,
                "loss": epoch_loss.0 / epoch_loss.1.max(1) as f64,
                "lr": schedule.lr_at(step - 1),
                "elapsed_s": start.elapsed().as_secs_f64(),
            }))?;
            epoch_loss = (0.0, 0);
            let epoch_no = epoch as usize + 1;
            if !val.is_empty() && (epoch_no % t.val_every == 0 || step == end || timed_out) {
                for &r in &val_scales {
                    let row = evaluate(Some(&trainer.model), &val, r, &cfg.eval.shave)?;
                    log.record(json!({
                        "event": "val",
                        "epoch": epoch,
                        "step": step,
                        "scale": r.value(),
                        "psnr": row.model_psnr,
                        "ssim": row.model_ssim,
                        "bicubic_psnr": row.bicubic_psnr,
                    }))?;
                    report.validation.push(row);
                }
            }
            if epoch_no % t.checkpoint_every == 0 || step == end || timed_out {
                checkpoint::save(&ck_path, &trainer.model, Some(&trainer.adam), &trainer.meta())?;
            }
        }
        if timed_out && step < end {
            log::info!("time limit reached after {step} steps");
            report.stopped_early = true;
            break;
        }
    }
    drop(prefetch);
    if report.steps == 0 {
        checkpoint::save(&ck_path, &trainer.model, Some(&trainer.adam), &trainer.meta())?;
    }
    Ok(report)
}
