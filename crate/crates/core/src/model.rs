//! The full super-resolution network: feature extractor plus one of three
//! upscale heads.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::image::{ColorSpace, ImagePlane};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureNetConfig};
use crate::meta_upscale::{
    biconv_upscale_on_tape, map_features_on_tape, meta_upscale_on_tape, metabi_upscale_on_tape, offset_groups, predict_filters_on_tape,
    uniform_tensor, ScaleFactor, WeightNetConfig, WeightPredictionNet,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Per-channel RGB mean subtracted before feature extraction and added back
/// to the output.
pub const RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Meta,
    BiConv,
    MetaBi,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Meta => "meta",
            Backend::BiConv => "biconv",
            Backend::MetaBi => "metabi",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "meta" => Ok(Backend::Meta),
            "biconv" => Ok(Backend::BiConv),
            "metabi" | "meta-bi" => Ok(Backend::MetaBi),
            _ => Err(Error::Config(vec![format!("unknown backend '{s}' (expected meta, biconv or metabi)")])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(vec![format!("unknown preset '{s}' (expected desk or paper)")])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub features: FeatureNetConfig,
    pub weight_net: WeightNetConfig,
    pub backend: Backend,
}

impl ModelConfig {
    pub fn preset(preset: Preset, backend: Backend) -> Self {
        let features = match preset {
            Preset::Desk => FeatureNetConfig::desk(),
            Preset::Paper => FeatureNetConfig::paper(),
        };
        ModelConfig {
            features,
            weight_net: WeightNetConfig::new(features.feature_channels, features.image_channels),
            backend,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.features.validate(), self.weight_net.validate()] {
            if let Err(Error::Config(e)) = r {
                errs.extend(e);
            } else if let Err(e) = r {
                errs.push(e.to_string());
            }
        }
        if self.weight_net.in_channels != self.features.feature_channels {
            errs.push(format!(
                "upscale input channels {} differ from feature channels {}",
                self.weight_net.in_channels, self.features.feature_channels
            ));
        }
        if self.weight_net.out_channels != self.features.image_channels {
            errs.push(format!(
                "upscale output channels {} differ from image channels {}",
                self.weight_net.out_channels, self.features.image_channels
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let f = &self.features;
        let w = &self.weight_net;
        [
            ("backend", self.backend.to_string()),
            ("features.num_blocks", f.num_blocks.to_string()),
            ("features.convs_per_block", f.convs_per_block.to_string()),
            ("features.growth_rate", f.growth_rate.to_string()),
            ("features.feature_channels", f.feature_channels.to_string()),
            ("features.image_channels", f.image_channels.to_string()),
            ("features.kernel_size", f.kernel_size.to_string()),
            ("weight_net.in_channels", w.in_channels.to_string()),
            ("weight_net.out_channels", w.out_channels.to_string()),
            ("weight_net.kernel_size", w.kernel_size.to_string()),
            ("weight_net.hidden", w.hidden.to_string()),
            ("weight_net.include_scale", w.include_scale.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &HashMap<String, String>) -> Result<Self> {
        let mut errs = Vec::new();
        let mut num = |key: &str| -> usize {
            match kv.get(key).map(|v| v.parse::<usize>()) {
                Some(Ok(v)) => v,
                Some(Err(_)) => {
                    errs.push(format!("{key}: not an integer"));
                    0
                }
                None => {
                    errs.push(format!("{key}: missing"));
                    0
                }
            }
        };
        let features = FeatureNetConfig {
            num_blocks: num("features.num_blocks"),
            convs_per_block: num("features.convs_per_block"),
            growth_rate: num("features.growth_rate"),
            feature_channels: num("features.feature_channels"),
            image_channels: num("features.image_channels"),
            kernel_size: num("features.kernel_size"),
        };
        let mut weight_net = WeightNetConfig {
            in_channels: num("weight_net.in_channels"),
            out_channels: num("weight_net.out_channels"),
            kernel_size: num("weight_net.kernel_size"),
            hidden: num("weight_net.hidden"),
            include_scale: true,
        };
        match kv.get("weight_net.include_scale").map(|v| v.parse::<bool>()) {
            Some(Ok(b)) => weight_net.include_scale = b,
            _ => errs.push("weight_net.include_scale: missing or not a boolean".into()),
        }
        let backend = match kv.get("backend").map(|v| v.parse::<Backend>()) {
            Some(Ok(b)) => b,
            _ => {
                errs.push("backend: missing or unknown".into());
                Backend::Meta
            }
        };
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cfg = ModelConfig {
            features,
            weight_net,
            backend,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Meta(WeightPredictionNet),
    BiConv { weight: ParamId, bias: ParamId },
    MetaBi(WeightPredictionNet),
}

/// Wall time of one inference, split by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub feature_learning: Duration,
    pub weight_prediction: Duration,
    pub feature_mapping: Duration,
    pub total: Duration,
    pub filter_groups: usize,
    pub output_pixels: usize,
    pub cache_hit: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

type FilterKey = (u64, usize, usize);

struct FilterCache<T: Element> {
    filters: HashMap<FilterKey, Tensor<T>>,
    stats: CacheStats,
}

pub struct MetaSr<T: Element = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    features: FeatureExtractor,
    head: Head,
    cache: Mutex<FilterCache<T>>,
}

/// Tape handles produced by [`MetaSr::forward`].
pub struct ForwardVars {
    pub features: Var,
    pub output: Var,
}

impl<T: Element> MetaSr<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let features = FeatureExtractor::init(config.features, &mut store, "fe", &mut rng)?;
        let w = config.weight_net;
        let head = match config.backend {
            Backend::Meta => Head::Meta(WeightPredictionNet::init(w, &mut store, "up", &mut rng)?),
            Backend::MetaBi => Head::MetaBi(WeightPredictionNet::init(w, &mut store, "up", &mut rng)?),
            Backend::BiConv => {
                let bound = 1.0 / (w.patch_len() as f64).sqrt();
                let k = w.kernel_size;
                Head::BiConv {
                    weight: store.insert(
                        "up.weight",
                        uniform_tensor(&mut rng, &[w.out_channels, w.in_channels, k, k], bound),
                    )?,
                    bias: store.insert("up.bias", uniform_tensor(&mut rng, &[w.out_channels], bound))?,
                }
            }
        };
        Ok(Self::assemble(config, store, features, head))
    }

    /// Rebuilds a model around an existing parameter store, checking that
    /// every expected tensor is present with the right shape.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let features = FeatureExtractor::bind(config.features, &store, "fe")?;
        let w = config.weight_net;
        let head = match config.backend {
            Backend::Meta => Head::Meta(WeightPredictionNet::bind(w, &store, "up")?),
            Backend::MetaBi => Head::MetaBi(WeightPredictionNet::bind(w, &store, "up")?),
            Backend::BiConv => {
                let k = w.kernel_size;
                let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
                    let id = store
                        .id(name)
                        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
                    if store.get(id).shape() != shape {
                        return Err(Error::shape(
                            "biconv head",
                            format!("{name} has shape {:?}, expected {shape:?}", store.get(id).shape()),
                        ));
                    }
                    Ok(id)
                };
                Head::BiConv {
                    weight: get("up.weight", &[w.out_channels, w.in_channels, k, k])?,
                    bias: get("up.bias", &[w.out_channels])?,
                }
            }
        };
        let expected = parameter_count(&config);
        if store.num_elements() != expected {
            return Err(Error::shape(
                "model",
                format!("store holds {} values, configuration needs {expected}", store.num_elements()),
            ));
        }
        Ok(Self::assemble(config, store, features, head))
    }

    fn assemble(config: ModelConfig, store: ParamStore<T>, features: FeatureExtractor, head: Head) -> Self {
        MetaSr {
            config,
            store,
            features,
            head,
            cache: Mutex::new(FilterCache {
                filters: HashMap::new(),
                stats: CacheStats::default(),
            }),
        }
    }

    pub fn backend(&self) -> Backend {
        self.config.backend
    }

    fn mean_offsets(&self, sign: f64) -> Option<Vec<T>> {
        (self.config.features.image_channels == 3).then(|| RGB_MEAN.iter().map(|&m| T::from_f64_lossy(sign * m)).collect())
    }

    /// Records the network on `tape` for one `[C, H, W]` image.
    pub fn forward(&self, tape: &mut Tape<T>, lr: Var, r: ScaleFactor) -> Result<ForwardVars> {
        let x = match self.mean_offsets(-1.0) {
            Some(m) => tape.add_channel_const(lr, &m)?,
            None => lr,
        };
        let features = self.features.forward(tape, &self.store, x)?;
        let up = match &self.head {
            Head::Meta(net) => meta_upscale_on_tape(tape, &self.store, net, features, r, true)?.output,
            Head::MetaBi(net) => metabi_upscale_on_tape(tape, &self.store, net, features, r)?,
            Head::BiConv { weight, bias } => {
                let w = tape.param(&self.store, *weight);
                let b = tape.param(&self.store, *bias);
                biconv_upscale_on_tape(tape, features, r, w, Some(b))?
            }
        };
        let output = match self.mean_offsets(1.0) {
            Some(m) => tape.add_channel_const(up, &m)?,
            None => up,
        };
        Ok(ForwardVars { features, output })
    }

    /// Inference on an image; the result is clamped to `[0, 1]`.
    pub fn upscale(&self, img: &ImagePlane, r: ScaleFactor) -> Result<ImagePlane> {
        Ok(self.upscale_timed(img, r)?.0)
    }

    /// Inference with per-stage wall times. For the meta backend the
    /// predicted filters are cached per `(r, output size)`.
    pub fn upscale_timed(&self, img: &ImagePlane, r: ScaleFactor) -> Result<(ImagePlane, StageTimes)> {
        if img.channels() != self.config.features.image_channels {
            return Err(Error::shape(
                "upscale",
                format!("image has {} channels, model expects {}", img.channels(), self.config.features.image_channels),
            ));
        }
        let start = Instant::now();
        let mut times = StageTimes::default();
        let mut tape = Tape::inference();
        let lr = tape.constant(img.to_tensor());
        let x = match self.mean_offsets(-1.0) {
            Some(m) => tape.add_channel_const(lr, &m)?,
            None => lr,
        };
        let features = self.features.forward(&mut tape, &self.store, x)?;
        times.feature_learning = start.elapsed();
        let up = match &self.head {
            Head::Meta(net) => {
                let (h, w) = (img.height(), img.width());
                let (out_h, out_w) = (r.output_len(h), r.output_len(w));
                if out_h == 0 || out_w == 0 {
                    return Err(Error::InvalidArgument(format!("scale {r} maps {h}x{w} to an empty image")));
                }
                let t0 = Instant::now();
                let groups = offset_groups(r, out_h, out_w, true);
                let key = (r.value().to_bits(), out_h, out_w);
                let cached = {
                    let mut cache = self.cache.lock().expect("cache lock");
                    let hit = cache.filters.get(&key).cloned();
                    if hit.is_some() {
                        cache.stats.hits += 1;
                    } else {
                        cache.stats.misses += 1;
                    }
                    hit
                };
                times.cache_hit = cached.is_some();
                let filters = match cached {
                    Some(t) => tape.constant(t),
                    None => {
                        let f = predict_filters_on_tape(&mut tape, &self.store, net, &groups)?;
                        let value = tape.value(f).clone();
                        self.cache.lock().expect("cache lock").filters.insert(key, value);
                        f
                    }
                };
                times.weight_prediction = t0.elapsed();
                times.filter_groups = groups.len();
                let t1 = Instant::now();
                let out = map_features_on_tape(&mut tape, features, filters, &groups, &net.config)?;
                times.feature_mapping = t1.elapsed();
                out
            }
            Head::MetaBi(net) => {
                let t1 = Instant::now();
                let out = metabi_upscale_on_tape(&mut tape, &self.store, net, features, r)?;
                times.feature_mapping = t1.elapsed();
                out
            }
            Head::BiConv { weight, bias } => {
                let t1 = Instant::now();
                let w = tape.param(&self.store, *weight);
                let b = tape.param(&self.store, *bias);
                let out = biconv_upscale_on_tape(&mut tape, features, r, w, Some(b))?;
                times.feature_mapping = t1.elapsed();
                out
            }
        };
        let output = match self.mean_offsets(1.0) {
            Some(m) => tape.add_channel_const(up, &m)?,
            None => up,
        };
        let colorspace = if img.channels() == 1 { ColorSpace::Y } else { img.colorspace() };
        let out = ImagePlane::from_tensor(tape.value(output), colorspace)?.clamp();
        times.total = start.elapsed();
        times.output_pixels = out.height() * out.width();
        Ok((out, times))
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.lock().expect("cache lock").stats
    }

    pub fn clear_cache(&self) {
        let mut c = self.cache.lock().expect("cache lock");
        c.filters.clear();
        c.stats = CacheStats::default();
    }
}

/// Number of scalar parameters a configuration owns.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let w = &config.weight_net;
    let head = match config.backend {
        Backend::Meta | Backend::MetaBi => {
            w.hidden * w.input_dim() + w.hidden + w.filter_len() * w.hidden + w.filter_len()
        }
        Backend::BiConv => w.filter_len() + w.out_channels,
    };
    config.features.parameter_count() + head
}
