//! Arbitrary-scale upsampling with per-pixel predicted filters.
//!
//! Every output pixel `(i, j)` is projected onto the low-resolution grid at
//! `(floor(i/r), floor(j/r))`. A small fully-connected network maps the
//! pixel's offset vector `(i/r - floor(i/r), j/r - floor(j/r), 1/r)` to a
//! `(C_in*k*k, C_out)` filter, which is applied to the `k x k` feature
//! neighbourhood around the projected location.
//!
//! Offsets only depend on the fractional parts, so pixels are grouped by
//! their offset and the weight network runs once per distinct offset.
//!
//! The module also hosts the two interpolation-based baselines: a fixed
//! learned convolution after bilinear feature upsampling ("BiConv") and the
//! same with a kernel predicted per scale ("Meta-Bi").

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::MapPlan;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Largest denominator tried when recognising a scale as an exact fraction.
const MAX_DENOMINATOR: u64 = 1000;

/// An upscaling factor `r > 0`.
///
/// Scales that are (to within 1e-9) a fraction `p/q` with `q <= 1000` are
/// stored exactly, so projections, offsets and output sizes are computed in
/// integer arithmetic. Every grid scale `1.1, 1.2, ..., 4.0` qualifies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleFactor {
    value: f64,
    ratio: Option<(u64, u64)>,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl ScaleFactor {
    pub fn new(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidArgument(format!("scale factor must be a positive number, got {r}")));
        }
        let ratio = (1..=MAX_DENOMINATOR).find_map(|q| {
            let p = (r * q as f64).round();
            ((r * q as f64 - p).abs() < 1e-9 * q as f64 && p >= 1.0).then_some((p as u64, q))
        });
        let ratio = ratio.map(|(p, q)| {
            let d = gcd(p, q);
            (p / d, q / d)
        });
        Ok(ScaleFactor { value: r, ratio })
    }

    /// Scale `tenths / 10`, exact.
    pub fn from_tenths(tenths: u32) -> Result<Self> {
        if tenths == 0 {
            return Err(Error::InvalidArgument("scale factor must be positive".into()));
        }
        let d = gcd(tenths as u64, 10);
        Ok(ScaleFactor {
            value: tenths as f64 / 10.0,
            ratio: Some((tenths as u64 / d, 10 / d)),
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `(p, q)` with `r = p/q` when the scale is an exact small fraction.
    pub fn ratio(&self) -> Option<(u64, u64)> {
        self.ratio
    }

    pub fn inverse(&self) -> f64 {
        match self.ratio {
            Some((p, q)) => q as f64 / p as f64,
            None => 1.0 / self.value,
        }
    }

    pub fn is_integer(&self) -> bool {
        matches!(self.ratio, Some((_, 1)))
    }

    /// `floor(len * r)`.
    pub fn output_len(&self, len: usize) -> usize {
        match self.ratio {
            Some((p, q)) => (len as u64 * p / q) as usize,
            None => (len as f64 * self.value).floor() as usize,
        }
    }

    /// `(floor(i / r), i / r - floor(i / r))`.
    pub fn divide(&self, i: usize) -> (usize, f64) {
        match self.ratio {
            Some((p, q)) => {
                let n = i as u64 * q;
                ((n / p) as usize, (n % p) as f64 / p as f64)
            }
            None => {
                let x = i as f64 / self.value;
                let f = x.floor();
                (f as usize, x - f)
            }
        }
    }

    /// Training and evaluation cover `(1, 4]`; outside it the model is
    /// extrapolating.
    pub fn in_training_range(&self) -> bool {
        self.value > 1.0 && self.value <= 4.0 + 1e-12
    }
}

impl std::fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.value)
    }
}

/// Projects an output pixel onto the low-resolution grid.
pub fn project_location(i: usize, j: usize, r: ScaleFactor) -> (usize, usize) {
    (r.divide(i).0, r.divide(j).0)
}

/// Input of the weight-prediction network for one output pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetVector {
    pub frac_i: f64,
    pub frac_j: f64,
    /// `1/r`; absent for the offset-only variant.
    pub inv_r: Option<f64>,
}

impl OffsetVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.frac_i, self.frac_j];
        v.extend(self.inv_r);
        v
    }

    pub fn dim(&self) -> usize {
        2 + usize::from(self.inv_r.is_some())
    }
}

pub fn offset_vector(i: usize, j: usize, r: ScaleFactor, include_scale: bool) -> OffsetVector {
    OffsetVector {
        frac_i: r.divide(i).1,
        frac_j: r.divide(j).1,
        inv_r: include_scale.then(|| r.inverse()),
    }
}

/// Output pixels grouped by identical offset vector. Offsets are separable,
/// so groups are the product of distinct row offsets and distinct column
/// offsets; group `g` is row class `g / n_col_classes`, column class
/// `g % n_col_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetGroups {
    pub scale: ScaleFactor,
    pub out_h: usize,
    pub out_w: usize,
    pub row_fracs: Vec<f64>,
    pub col_fracs: Vec<f64>,
    pub row_class: Vec<usize>,
    pub col_class: Vec<usize>,
}

fn classify(r: ScaleFactor, len: usize, share: bool) -> (Vec<f64>, Vec<usize>) {
    let mut fracs = Vec::new();
    let mut class = Vec::with_capacity(len);
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for i in 0..len {
        let f = r.divide(i).1;
        let c = if share {
            *seen.entry(f.to_bits()).or_insert_with(|| {
                fracs.push(f);
                fracs.len() - 1
            })
        } else {
            fracs.push(f);
            fracs.len() - 1
        };
        class.push(c);
    }
    (fracs, class)
}

impl OffsetGroups {
    pub fn len(&self) -> usize {
        self.row_fracs.len() * self.col_fracs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_of(&self, i: usize, j: usize) -> usize {
        self.row_class[i] * self.col_fracs.len() + self.col_class[j]
    }

    pub fn offset(&self, g: usize, include_scale: bool) -> OffsetVector {
        let n = self.col_fracs.len();
        OffsetVector {
            frac_i: self.row_fracs[g / n],
            frac_j: self.col_fracs[g % n],
            inv_r: include_scale.then(|| self.scale.inverse()),
        }
    }

    /// All output pixels `(i, j)` in group `g`.
    pub fn pixels(&self, g: usize) -> Vec<(usize, usize)> {
        let n = self.col_fracs.len();
        let (rc, cc) = (g / n, g % n);
        let rows = (0..self.out_h).filter(|&i| self.row_class[i] == rc);
        rows.flat_map(|i| {
            (0..self.out_w)
                .filter(move |&j| self.col_class[j] == cc)
                .map(move |j| (i, j))
        })
        .collect()
    }

    /// `[G, d]` matrix of offset vectors, one row per group.
    pub fn input_matrix<T: Element>(&self, include_scale: bool) -> Tensor<T> {
        let d = if include_scale { 3 } else { 2 };
        let data: Vec<f64> = (0..self.len()).flat_map(|g| self.offset(g, include_scale).to_vec()).collect();
        Tensor::from_f64(&[self.len(), d], &data).expect("non-empty groups")
    }

    fn plan(&self, in_h: usize, in_w: usize, k: usize) -> MapPlan {
        MapPlan {
            in_h,
            in_w,
            row_src: (0..self.out_h).map(|i| self.scale.divide(i).0).collect(),
            col_src: (0..self.out_w).map(|j| self.scale.divide(j).0).collect(),
            row_group: self.row_class.clone(),
            col_group: self.col_class.clone(),
            n_col_groups: self.col_fracs.len(),
            n_groups: self.len(),
            k,
        }
    }
}

/// Groups the pixels of an `out_h x out_w` output by offset vector.
pub fn distinct_offsets(r: ScaleFactor, out_h: usize, out_w: usize) -> OffsetGroups {
    offset_groups(r, out_h, out_w, true)
}

/// With `share == false` every pixel gets its own group, which is the
/// uncached per-pixel evaluation.
pub fn offset_groups(r: ScaleFactor, out_h: usize, out_w: usize, share: bool) -> OffsetGroups {
    let (row_fracs, row_class) = classify(r, out_h, share);
    let (col_fracs, col_class) = classify(r, out_w, share);
    OffsetGroups {
        scale: r,
        out_h,
        out_w,
        row_fracs,
        col_fracs,
        row_class,
        col_class,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub hidden: usize,
    pub include_scale: bool,
}

impl WeightNetConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        WeightNetConfig {
            in_channels,
            out_channels,
            kernel_size: 3,
            hidden: 256,
            include_scale: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        if self.include_scale {
            3
        } else {
            2
        }
    }

    /// Rows of a predicted filter: `C_in * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }

    pub fn filter_len(&self) -> usize {
        self.patch_len() * self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden == 0 {
            errs.push(format!("weight net dimensions must be positive: {self:?}"));
        }
        if self.kernel_size % 2 == 0 {
            errs.push(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Two fully-connected layers with a ReLU between them, mapping offset
/// vectors to flat filters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPredictionNet {
    pub config: WeightNetConfig,
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    pub output_weight: ParamId,
    pub output_bias: ParamId,
}

pub(crate) fn uniform_tensor<T: Element, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("positive shape")
}

impl WeightPredictionNet {
    /// Registers the network's parameters under `prefix`. The hidden layer
    /// uses a fan-in scaled uniform init; the output layer a tenth of that.
    pub fn init<T: Element, R: Rng>(
        config: WeightNetConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, h, o) = (config.input_dim(), config.hidden, config.filter_len());
        let b1 = 1.0 / (d as f64).sqrt();
        let b2 = 0.1 / (h as f64).sqrt();
        Ok(WeightPredictionNet {
            config,
            hidden_weight: store.insert(format!("{prefix}.fc1.weight"), uniform_tensor(rng, &[h, d], b1))?,
            hidden_bias: store.insert(format!("{prefix}.fc1.bias"), uniform_tensor(rng, &[h], b1))?,
            output_weight: store.insert(format!("{prefix}.fc2.weight"), uniform_tensor(rng, &[o, h], b2))?,
            output_bias: store.insert(format!("{prefix}.fc2.bias"), uniform_tensor(rng, &[o], b2))?,
        })
    }

    /// Looks up previously registered parameters.
    pub fn bind<T: Element>(config: WeightNetConfig, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {prefix}.{n}")))
        };
        let net = WeightPredictionNet {
            config,
            hidden_weight: get("fc1.weight")?,
            hidden_bias: get("fc1.bias")?,
            output_weight: get("fc2.weight")?,
            output_bias: get("fc2.bias")?,
        };
        let expect = [
            (net.hidden_weight, vec![config.hidden, config.input_dim()]),
            (net.hidden_bias, vec![config.hidden]),
            (net.output_weight, vec![config.filter_len(), config.hidden]),
            (net.output_bias, vec![config.filter_len()]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "weight net",
                    format!("{} has shape {:?}, expected {shape:?}", store.name(id), store.get(id).shape()),
                ));
            }
        }
        Ok(net)
    }

    /// Records the network on `tape` for a `[N, d]` batch of offset vectors,
    /// producing `[N, C_in*k*k*C_out]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, offsets: Var) -> Result<Var> {
        let d = tape.shape(offsets).last().copied().unwrap_or(0);
        if d != self.config.input_dim() {
            return Err(Error::shape(
                "predict_weights",
                format!("offset vector has {d} components, network expects {}", self.config.input_dim()),
            ));
        }
        let w1 = tape.param(store, self.hidden_weight);
        let b1 = tape.param(store, self.hidden_bias);
        let w2 = tape.param(store, self.output_weight);
        let b2 = tape.param(store, self.output_bias);
        let h = tape.linear(offsets, w1, Some(b1), true)?;
        tape.linear(h, w2, Some(b2), false)
    }
}

/// A dynamic filter of logical shape `(C_in, C_out, k, k)`, stored flat as a
/// `(C_in*k*k, C_out)` matrix whose row index is `(c*k + ky)*k + kx`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedFilter<T: Element> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub weights: Tensor<T>,
}

impl<T: Element> PredictedFilter<T> {
    /// The filter as a `[C_out, C_in, k, k]` convolution kernel.
    pub fn to_conv_kernel(&self) -> Tensor<T> {
        let (ci, co, k) = (self.in_channels, self.out_channels, self.kernel_size);
        let kdim = ci * k * k;
        let src = self.weights.data();
        let mut out = vec![T::zero(); kdim * co];
        for m in 0..kdim {
            for o in 0..co {
                out[o * kdim + m] = src[m * co + o];
            }
        }
        Tensor::new(&[co, ci, k, k], out).expect("filter shape")
    }
}

pub fn predict_weights<T: Element>(
    v: &OffsetVector,
    net: &WeightPredictionNet,
    store: &ParamStore<T>,
) -> Result<PredictedFilter<T>> {
    let mut tape = Tape::inference();
    let vec = v.to_vec();
    let x = tape.constant(Tensor::from_f64(&[1, vec.len()], &vec)?);
    let y = net.forward(&mut tape, store, x)?;
    let cfg = net.config;
    Ok(PredictedFilter {
        in_channels: cfg.in_channels,
        out_channels: cfg.out_channels,
        kernel_size: cfg.kernel_size,
        weights: tape.value(y).clone().reshape(&[cfg.patch_len(), cfg.out_channels])?,
    })
}

/// `patch[1, C_in*k*k] x filter[C_in*k*k, C_out]`.
pub fn map_feature<T: Element>(patch: &Tensor<T>, filter: &PredictedFilter<T>) -> Result<Tensor<T>> {
    let (kdim, co) = (filter.weights.shape()[0], filter.out_channels);
    if patch.numel() != kdim {
        return Err(Error::shape("map_feature", format!("patch of {} values for a {kdim}-row filter", patch.numel())));
    }
    let w = filter.weights.data();
    let mut out = vec![T::zero(); co];
    for (m, &a) in patch.data().iter().enumerate() {
        for (o, acc) in out.iter_mut().enumerate() {
            *acc = *acc + a * w[m * co + o];
        }
    }
    Tensor::new(&[co], out)
}

/// Intermediate results of [`meta_upscale_on_tape`], exposed for timing and
/// inspection.
pub struct MetaUpscaleVars {
    pub filters: Var,
    pub output: Var,
    pub groups: OffsetGroups,
}

/// Predicts the per-offset filters for an upscale of `in_h x in_w` by `r`.
pub fn predict_filters_on_tape<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    net: &WeightPredictionNet,
    groups: &OffsetGroups,
) -> Result<Var> {
    let v = tape.constant(groups.input_matrix(net.config.include_scale));
    net.forward(tape, store, v)
}

pub fn map_features_on_tape<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    filters: Var,
    groups: &OffsetGroups,
    config: &WeightNetConfig,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    let plan = Arc::new(groups.plan(s[1], s[2], config.kernel_size));
    tape.meta_map(features, filters, plan, config.out_channels)
}

fn check_features(shape: &[usize], cfg: &WeightNetConfig) -> Result<()> {
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(Error::shape(
            "meta_upscale",
            format!("features {shape:?}, expected [{}, H, W]", cfg.in_channels),
        ));
    }
    if shape[1] < cfg.kernel_size || shape[2] < cfg.kernel_size {
        return Err(Error::shape(
            "meta_upscale",
            format!("feature map {}x{} smaller than kernel {}", shape[1], shape[2], cfg.kernel_size),
        ));
    }
    Ok(())
}

/// Differentiable upscale of a `[C_in, H, W]` feature map to
/// `[C_out, floor(H*r), floor(W*r)]`. With `share_offsets == false` the
/// weight network is evaluated separately for every output pixel.
pub fn meta_upscale_on_tape<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    net: &WeightPredictionNet,
    features: Var,
    r: ScaleFactor,
    share_offsets: bool,
) -> Result<MetaUpscaleVars> {
    let s = tape.shape(features).to_vec();
    check_features(&s, &net.config)?;
    let (out_h, out_w) = (r.output_len(s[1]), r.output_len(s[2]));
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("scale {r} maps {}x{} to an empty image", s[1], s[2])));
    }
    let groups = offset_groups(r, out_h, out_w, share_offsets);
    let filters = predict_filters_on_tape(tape, store, net, &groups)?;
    let output = map_features_on_tape(tape, features, filters, &groups, &net.config)?;
    Ok(MetaUpscaleVars {
        filters,
        output,
        groups,
    })
}

/// Forward-only convenience wrapper around [`meta_upscale_on_tape`].
pub fn meta_upscale<T: Element>(
    features: &Tensor<T>,
    r: ScaleFactor,
    net: &WeightPredictionNet,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let f = tape.constant(features.clone());
    let vars = meta_upscale_on_tape(&mut tape, store, net, f, r, true)?;
    Ok(tape.value(vars.output).clone())
}

/// Bilinear feature upsampling followed by one shared learned convolution.
pub fn biconv_upscale_on_tape<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    r: ScaleFactor,
    kernel: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("biconv_upscale", format!("features must be [C,H,W], got {s:?}")));
    }
    let (out_h, out_w) = (r.output_len(s[1]), r.output_len(s[2]));
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("scale {r} maps {}x{} to an empty image", s[1], s[2])));
    }
    let k = tape.shape(kernel).get(2).copied().unwrap_or(1);
    let up = tape.bilinear(features, out_h, out_w, r.value())?;
    tape.conv2d_fused(&[up], kernel, bias, (k - 1) / 2, false)
}

pub fn biconv_upscale<T: Element>(features: &Tensor<T>, r: ScaleFactor, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let f = tape.constant(features.clone());
    let w = tape.constant(kernel.clone());
    let y = biconv_upscale_on_tape(&mut tape, f, r, w, None)?;
    Ok(tape.value(y).clone())
}

/// Bilinear feature upsampling followed by a convolution whose kernel the
/// weight network predicts from `(0, 0, 1/r)`: one kernel per scale.
pub fn metabi_upscale_on_tape<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    net: &WeightPredictionNet,
    features: Var,
    r: ScaleFactor,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    check_features(&s, &net.config)?;
    let cfg = net.config;
    let v = OffsetVector {
        frac_i: 0.0,
        frac_j: 0.0,
        inv_r: cfg.include_scale.then(|| r.inverse()),
    }
    .to_vec();
    let x = tape.constant(Tensor::from_f64(&[1, v.len()], &v)?);
    let flat = net.forward(tape, store, x)?;
    let kernel = tape.filter_to_kernel(flat, cfg.in_channels, cfg.out_channels, cfg.kernel_size)?;
    biconv_upscale_on_tape(tape, features, r, kernel, None)
}

pub fn metabi_upscale<T: Element>(
    features: &Tensor<T>,
    r: ScaleFactor,
    net: &WeightPredictionNet,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let f = tape.constant(features.clone());
    let y = metabi_upscale_on_tape(&mut tape, store, net, f, r)?;
    Ok(tape.value(y).clone())
}
