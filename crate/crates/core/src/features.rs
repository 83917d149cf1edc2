//! Residual-dense feature extractor.
//!
//! Layout: two shallow 3x3 convs, `D` residual dense blocks, a 1x1 fusion of
//! all block outputs, a 3x3 conv and a global skip from the first shallow
//! feature. Each block stacks `C` densely connected 3x3 conv+ReLU layers of
//! `G` channels, a 1x1 local fusion back to `inC` channels and a local skip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::meta_upscale::uniform_tensor;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub num_blocks: usize,
    pub convs_per_block: usize,
    pub growth_rate: usize,
    pub feature_channels: usize,
    pub image_channels: usize,
    pub kernel_size: usize,
}

impl FeatureNetConfig {
    pub fn desk() -> Self {
        FeatureNetConfig {
            num_blocks: 2,
            convs_per_block: 3,
            growth_rate: 16,
            feature_channels: 16,
            image_channels: 3,
            kernel_size: 3,
        }
    }

    pub fn paper() -> Self {
        FeatureNetConfig {
            num_blocks: 16,
            convs_per_block: 8,
            growth_rate: 64,
            feature_channels: 64,
            image_channels: 3,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("num_blocks", self.num_blocks),
            ("convs_per_block", self.convs_per_block),
            ("growth_rate", self.growth_rate),
            ("feature_channels", self.feature_channels),
            ("image_channels", self.image_channels),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.kernel_size % 2 == 0 {
            errs.push(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Closed-form number of scalar parameters (weights and biases).
    pub fn parameter_count(&self) -> usize {
        let (g0, g, c, d, k2, ic) = (
            self.feature_channels,
            self.growth_rate,
            self.convs_per_block,
            self.num_blocks,
            self.kernel_size * self.kernel_size,
            self.image_channels,
        );
        let shallow = (g0 * ic * k2 + g0) + (g0 * g0 * k2 + g0);
        let dense: usize = (0..c).map(|i| g * (g0 + i * g) * k2 + g).sum();
        let block = dense + g0 * (g0 + c * g) + g0;
        let fusion = (g0 * d * g0 + g0) + (g0 * g0 * k2 + g0);
        shallow + d * block + fusion
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

impl ConvParams {
    fn init<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        Ok(ConvParams {
            weight: store.insert(format!("{name}.weight"), uniform_tensor(rng, &[out_c, in_c, k, k], bound))?,
            bias: store.insert(format!("{name}.bias"), uniform_tensor(rng, &[out_c], bound))?,
        })
    }

    fn bind<T: Element>(store: &ParamStore<T>, name: &str, shape: [usize; 4]) -> Result<Self> {
        let get = |suffix: &str, want: &[usize]| {
            let full = format!("{name}.{suffix}");
            let id = store
                .id(&full)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {full}")))?;
            if store.get(id).shape() != want {
                return Err(Error::shape(
                    "feature extractor",
                    format!("{full} has shape {:?}, expected {want:?}", store.get(id).shape()),
                ));
            }
            Ok(id)
        };
        Ok(ConvParams {
            weight: get("weight", &shape)?,
            bias: get("bias", &shape[..1])?,
        })
    }

    fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[Var],
        relu: bool,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let k = tape.shape(w)[2];
        tape.conv2d_fused(inputs, w, Some(b), (k - 1) / 2, relu)
    }
}

/// Parameters of one residual dense block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RdbParams {
    dense: Vec<ConvParams>,
    fusion: ConvParams,
}

/// Residual dense block: `fusion(concat(x, y1..yC)) + x` with
/// `yi = relu(conv(concat(x, y1..y{i-1})))`.
pub fn build_rdb<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, input: Var, block: &RdbParams) -> Result<Var> {
    let fusion_out = store.get(block.fusion.weight).shape()[0];
    if tape.shape(input).first() != Some(&fusion_out) {
        return Err(Error::shape(
            "build_rdb",
            format!("block input {:?} but block works on {fusion_out} channels", tape.shape(input)),
        ));
    }
    let mut feats = vec![input];
    for conv in &block.dense {
        let y = conv.apply(tape, store, &feats, true)?;
        feats.push(y);
    }
    let fused = block.fusion.apply(tape, store, &feats, false)?;
    tape.add(fused, input)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureExtractor {
    pub config: FeatureNetConfig,
    shallow1: ConvParams,
    shallow2: ConvParams,
    blocks: Vec<RdbParams>,
    global_fusion: ConvParams,
    global_conv: ConvParams,
}

impl FeatureExtractor {
    pub fn init<T: Element, R: Rng>(
        config: FeatureNetConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        Self::build(config, prefix, |name, shape| {
            ConvParams::init(store, rng, name, shape[0], shape[1], shape[2])
        })
    }

    pub fn bind<T: Element>(config: FeatureNetConfig, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        config.validate()?;
        Self::build(config, prefix, |name, shape| ConvParams::bind(store, name, shape))
    }

    fn build(
        config: FeatureNetConfig,
        prefix: &str,
        mut make: impl FnMut(&str, [usize; 4]) -> Result<ConvParams>,
    ) -> Result<Self> {
        let (g0, g, k) = (config.feature_channels, config.growth_rate, config.kernel_size);
        let shallow1 = make(&format!("{prefix}.sfe1"), [g0, config.image_channels, k, k])?;
        let shallow2 = make(&format!("{prefix}.sfe2"), [g0, g0, k, k])?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for d in 0..config.num_blocks {
            let dense = (0..config.convs_per_block)
                .map(|c| make(&format!("{prefix}.rdb{d}.conv{c}"), [g, g0 + c * g, k, k]))
                .collect::<Result<Vec<_>>>()?;
            let fusion = make(&format!("{prefix}.rdb{d}.lff"), [g0, g0 + config.convs_per_block * g, 1, 1])?;
            blocks.push(RdbParams { dense, fusion });
        }
        let global_fusion = make(&format!("{prefix}.gff1"), [g0, config.num_blocks * g0, 1, 1])?;
        let global_conv = make(&format!("{prefix}.gff2"), [g0, g0, k, k])?;
        Ok(FeatureExtractor {
            config,
            shallow1,
            shallow2,
            blocks,
            global_fusion,
            global_conv,
        })
    }

    pub fn block(&self, d: usize) -> &RdbParams {
        &self.blocks[d]
    }

    /// `[image_channels, H, W]` -> `[feature_channels, H, W]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        let k = self.config.kernel_size;
        if s.len() != 3 || s[0] != self.config.image_channels {
            return Err(Error::shape(
                "extract_features",
                format!("image {s:?}, expected [{}, H, W]", self.config.image_channels),
            ));
        }
        if s[1] < k || s[2] < k {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is smaller than the {k}x{k} kernel",
                s[1], s[2]
            )));
        }
        let f_minus1 = self.shallow1.apply(tape, store, &[image], false)?;
        let mut x = self.shallow2.apply(tape, store, &[f_minus1], false)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = build_rdb(tape, store, x, block)?;
            outs.push(x);
        }
        let fused = self.global_fusion.apply(tape, store, &outs, false)?;
        let g = self.global_conv.apply(tape, store, &[fused], false)?;
        tape.add(g, f_minus1)
    }
}
