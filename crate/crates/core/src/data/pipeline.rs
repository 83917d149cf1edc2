//! Training batches: per-batch scale sampling, HR-first patch cropping,
//! bicubic degradation and flip/rotate augmentation.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::bicubic::bicubic_resize_to;
use crate::data::image::ImagePlane;
use crate::error::{Error, Result};
use crate::meta_upscale::ScaleFactor;

pub const BATCH_SIZE: usize = 16;
pub const LR_PATCH: usize = 50;

/// Smallest and largest training scale, in tenths.
pub const MIN_SCALE_TENTHS: u32 = 11;
pub const MAX_SCALE_TENTHS: u32 = 40;

/// Uniform draw from `{1.1, 1.2, ..., 4.0}`.
pub fn sample_scale<R: Rng>(rng: &mut R) -> ScaleFactor {
    ScaleFactor::from_tenths(rng.gen_range(MIN_SCALE_TENTHS..=MAX_SCALE_TENTHS)).expect("positive")
}

/// Base learning rate halved every `halve_every` epochs.
pub fn lr_schedule(epoch: usize, base: f64, halve_every: usize) -> f64 {
    base * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}

/// `lr_schedule` with the default base of 1e-4 and 200-epoch halving.
pub fn default_lr(epoch: usize) -> f64 {
    lr_schedule(epoch, 1e-4, 200)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    Identity,
    FlipH,
    FlipV,
}

fn augment(img: &ImagePlane, flip: Augment, rot: bool) -> ImagePlane {
    let f = match flip {
        Augment::Identity => img.clone(),
        Augment::FlipH => img.flip_horizontal(),
        Augment::FlipV => img.flip_vertical(),
    };
    if rot {
        f.rotate90()
    } else {
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub lr: Vec<ImagePlane>,
    pub hr: Vec<ImagePlane>,
    pub scale: ScaleFactor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub lr_patch: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            batch_size: BATCH_SIZE,
            lr_patch: LR_PATCH,
        }
    }
}

/// Builds one batch of `(LR, HR)` pairs at a shared scale. The HR crop has
/// side `floor(lr_patch * r)` and is downscaled to exactly `lr_patch`.
pub fn make_batch<R: Rng>(
    hr_images: &[ImagePlane],
    scale: ScaleFactor,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<PatchBatch> {
    let hr_side = scale.output_len(spec.lr_patch);
    let eligible: Vec<&ImagePlane> = hr_images
        .iter()
        .filter(|img| {
            let ok = img.height() >= hr_side && img.width() >= hr_side;
            if !ok {
                log::debug!(
                    "skipping {}x{} image: smaller than the {hr_side}px crop for scale {scale}",
                    img.height(),
                    img.width()
                );
            }
            ok
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(format!(
            "no training image is at least {hr_side}x{hr_side} (needed for scale {scale})"
        )));
    }
    let mut lr = Vec::with_capacity(spec.batch_size);
    let mut hr = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let src = eligible[rng.gen_range(0..eligible.len())];
        let y = rng.gen_range(0..=src.height() - hr_side);
        let x = rng.gen_range(0..=src.width() - hr_side);
        let flip = [Augment::Identity, Augment::FlipH, Augment::FlipV][rng.gen_range(0..3)];
        let rot = rng.gen_bool(0.5);
        let crop = src.crop(y, x, hr_side, hr_side)?;
        let small = bicubic_resize_to(&crop, spec.lr_patch, spec.lr_patch, scale.inverse())?.quantize();
        hr.push(augment(&crop, flip, rot));
        lr.push(augment(&small, flip, rot));
    }
    Ok(PatchBatch { lr, hr, scale })
}

/// Deterministic batch source: batch `step` depends only on `(seed, step)`.
#[derive(Clone)]
pub struct BatchSource {
    images: Arc<Vec<ImagePlane>>,
    seed: u64,
    spec: BatchSpec,
}

impl BatchSource {
    pub fn new(images: Vec<ImagePlane>, seed: u64, spec: BatchSpec) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        Ok(BatchSource {
            images: Arc::new(images),
            seed,
            spec,
        })
    }

    pub fn rng_for_step(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }

    pub fn batch(&self, step: u64) -> Result<PatchBatch> {
        let mut rng = self.rng_for_step(step);
        let scale = sample_scale(&mut rng);
        make_batch(&self.images, scale, self.spec, &mut rng)
    }

    /// Produces batches `start..end` on a background thread through a
    /// bounded queue of `depth` batches.
    pub fn spawn(&self, start: u64, end: u64, depth: usize) -> (Receiver<Result<PatchBatch>>, JoinHandle<()>) {
        let (tx, rx) = sync_channel(depth.max(1));
        let src = self.clone();
        let handle = std::thread::spawn(move || {
            for step in start..end {
                if tx.send(src.batch(step)).is_err() {
                    break;
                }
            }
        });
        (rx, handle)
    }
}
