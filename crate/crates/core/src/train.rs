//! Training loop: L1 loss, Adam, step-indexed batches and a halving
//! learning-rate schedule.

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::checkpoint::TrainingMeta;
use crate::data::image::ImagePlane;
use crate::data::pipeline::{lr_schedule, BatchSource, PatchBatch};
use crate::error::{Error, Result};
use crate::model::MetaSr;
use crate::optim::AdamState;
use crate::params::ParamId;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub halve_every: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.steps_per_epoch.max(1) as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(self.epoch_of(step) as usize, self.base_lr, self.halve_every)
    }
}

pub struct Trainer<T: Element = f32> {
    pub model: MetaSr<T>,
    pub adam: AdamState<T>,
    pub schedule: Schedule,
    pub seed: u64,
    /// Number of optimizer steps taken so far.
    pub step: u64,
    /// Process batch items one after another instead of in parallel.
    pub sequential: bool,
}

type ItemGrads<T> = (f64, Vec<(ParamId, Vec<T>)>);

impl<T: Element> Trainer<T> {
    pub fn new(model: MetaSr<T>, schedule: Schedule, seed: u64) -> Result<Self> {
        let adam = AdamState::new(&model.store, schedule.base_lr)?;
        Ok(Trainer {
            model,
            adam,
            schedule,
            seed,
            step: 0,
            sequential: false,
        })
    }

    /// Continues from a saved model and optimizer state.
    pub fn resume(model: MetaSr<T>, adam: AdamState<T>, schedule: Schedule, meta: &TrainingMeta) -> Result<Self> {
        if adam.first_moment.len() != model.store.len() {
            return Err(Error::shape("resume", "optimizer state does not match the model"));
        }
        Ok(Trainer {
            model,
            adam,
            schedule,
            seed: meta.seed,
            step: meta.step,
            sequential: false,
        })
    }

    pub fn meta(&self) -> TrainingMeta {
        TrainingMeta {
            step: self.step,
            epoch: self.schedule.epoch_of(self.step),
            seed: self.seed,
            learning_rate: self.schedule.lr_at(self.step),
        }
    }

    fn item_gradients(&self, lr: &ImagePlane, hr: &ImagePlane, batch: &PatchBatch) -> Result<ItemGrads<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(lr.to_tensor());
        let y = tape.constant(hr.to_tensor());
        let out = self.model.forward(&mut tape, x, batch.scale)?.output;
        let loss = tape.l1_loss(out, y)?;
        let value = tape.value(loss).data()[0].as_f64();
        let grads = tape.gradients(loss)?;
        Ok((value, grads.params().map(|(id, g)| (id, g.to_vec())).collect()))
    }

    /// One optimizer step on `batch`. Returns the batch's mean L1 loss.
    ///
    /// Per-item gradients are summed in item order, so the result does not
    /// depend on how many threads computed them.
    pub fn train_step(&mut self, batch: &PatchBatch) -> Result<f64> {
        let n = batch.lr.len();
        if n == 0 || n != batch.hr.len() {
            return Err(Error::shape("train_step", format!("{n} LR vs {} HR patches", batch.hr.len())));
        }
        let pairs: Vec<(&ImagePlane, &ImagePlane)> = batch.lr.iter().zip(&batch.hr).collect();
        let chunk = if self.sequential { 1 } else { rayon::current_num_threads().max(1) };
        let mut acc: Vec<Vec<T>> = self.model.store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        let mut total = 0.0;
        for part in pairs.chunks(chunk) {
            let results: Vec<Result<ItemGrads<T>>> = if self.sequential {
                part.iter().map(|(l, h)| self.item_gradients(l, h, batch)).collect()
            } else {
                part.par_iter().map(|(l, h)| self.item_gradients(l, h, batch)).collect()
            };
            for r in results {
                let (loss, grads) = r?;
                total += loss;
                for (id, g) in grads {
                    acc[id.index()].iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        let inv = T::from_f64_lossy(1.0 / n as f64);
        let ids: Vec<ParamId> = self.model.store.ids().collect();
        for (id, mut g) in ids.into_iter().zip(acc) {
            g.iter_mut().for_each(|v| *v = *v * inv);
            self.model.store.get_mut(id).grad = Some(g);
        }
        self.adam.set_learning_rate(self.schedule.lr_at(self.step))?;
        self.adam.step(&mut self.model.store)?;
        self.model.clear_cache();
        self.step += 1;
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("loss became {loss} at step {}", self.step)));
        }
        Ok(loss)
    }

    /// Draws batch `self.step` from `source` and trains on it.
    pub fn step_from(&mut self, source: &BatchSource) -> Result<f64> {
        let batch = source.batch(self.step)?;
        self.train_step(&batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::ColorSpace;
    use crate::data::pipeline::BatchSpec;
    use crate::features::FeatureNetConfig;
    use crate::meta_upscale::WeightNetConfig;
    use crate::model::{Backend, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        let mut weight_net = WeightNetConfig::new(4, 3);
        weight_net.hidden = 8;
        ModelConfig {
            features: FeatureNetConfig {
                num_blocks: 1,
                convs_per_block: 1,
                growth_rate: 4,
                feature_channels: 4,
                image_channels: 3,
                kernel_size: 3,
            },
            weight_net,
            backend: Backend::Meta,
        }
    }

    fn source() -> BatchSource {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs = (0..2)
            .map(|_| {
                let px = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
                ImagePlane::new(64, 64, ColorSpace::Rgb, px).unwrap()
            })
            .collect();
        BatchSource::new(imgs, 3, BatchSpec { batch_size: 4, lr_patch: 12 }).unwrap()
    }

    fn schedule() -> Schedule {
        Schedule {
            base_lr: 1e-3,
            halve_every: 2,
            steps_per_epoch: 3,
        }
    }

    #[test]
    fn schedule_by_step() {
        let s = schedule();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(5), 1e-3);
        assert_eq!(s.lr_at(6), 5e-4);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let src = source();
        let mut a = Trainer::new(MetaSr::<f32>::init(tiny(), 0).unwrap(), schedule(), 3).unwrap();
        let mut b = Trainer::new(MetaSr::<f32>::init(tiny(), 0).unwrap(), schedule(), 3).unwrap();
        b.sequential = true;
        for _ in 0..3 {
            assert_eq!(a.step_from(&src).unwrap().to_bits(), b.step_from(&src).unwrap().to_bits());
        }
        for ((_, _, x), (_, _, y)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let src = source();
        let batch = src.batch(0).unwrap();
        let mut t = Trainer::new(MetaSr::<f32>::init(tiny(), 1).unwrap(), schedule(), 3).unwrap();
        let first = t.train_step(&batch).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = t.train_step(&batch).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
        assert_eq!(t.step, 31);
    }
}
