//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use metasr::data::{bicubic_resize, bicubic_resize_to, ColorSpace, ImagePlane};
use metasr::autograd::{Tape, Var};
use metasr::features::FeatureNetConfig;
use metasr::meta_upscale::{
    distinct_offsets, meta_upscale, meta_upscale_on_tape, ScaleFactor, WeightNetConfig, WeightPredictionNet,
};
use metasr::model::{Backend, MetaSr, ModelConfig};
use metasr::params::ParamStore;
use metasr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_image(h: usize, w: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImagePlane::new(h, w, ColorSpace::Rgb, px).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Six nested loops; zero padding.
pub fn naive_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let x = input.data();
    let kw = kernel.data();
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = (y + ky) as i64 - pad as i64;
                            let sx = (xx + kx) as i64 - pad as i64;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += x[(c * h + sy as usize) * w + sx as usize] * kw[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(&[co, oh, ow], out).unwrap()
}

/// Weight network evaluated with plain loops: `W2 relu(W1 v + b1) + b2`.
pub fn naive_mlp(store: &ParamStore<f64>, net: &WeightPredictionNet, v: &[f64]) -> Vec<f64> {
    let w1 = store.get(net.hidden_weight);
    let b1 = store.get(net.hidden_bias).data();
    let w2 = store.get(net.output_weight);
    let b2 = store.get(net.output_bias).data();
    let (h, d) = (w1.shape()[0], w1.shape()[1]);
    assert_eq!(d, v.len());
    let hidden: Vec<f64> = (0..h)
        .map(|a| {
            let s: f64 = (0..d).map(|b| w1.data()[a * d + b] * v[b]).sum::<f64>() + b1[a];
            s.max(0.0)
        })
        .collect();
    let o = w2.shape()[0];
    (0..o)
        .map(|a| (0..h).map(|b| w2.data()[a * h + b] * hidden[b]).sum::<f64>() + b2[a])
        .collect()
}

/// Per-pixel upscale with the scale given in tenths, so projections and
/// offsets come from integer arithmetic.
pub fn literal_meta_upscale(
    features: &Tensor<f64>,
    tenths: usize,
    store: &ParamStore<f64>,
    net: &WeightPredictionNet,
) -> Tensor<f64> {
    let cfg = net.config;
    let (ci, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let (co, k) = (cfg.out_channels, cfg.kernel_size);
    let half = (k / 2) as i64;
    let (oh, ow) = (h * tenths / 10, w * tenths / 10);
    let f = features.data();
    let mut out = vec![0.0; co * oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let (pi, pj) = (10 * i / tenths, 10 * j / tenths);
            let mut v = vec![
                (10 * i % tenths) as f64 / tenths as f64,
                (10 * j % tenths) as f64 / tenths as f64,
            ];
            if cfg.include_scale {
                v.push(10.0 / tenths as f64);
            }
            let wts = naive_mlp(store, net, &v);
            for o in 0..co {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = pi as i64 + ky as i64 - half;
                            let sx = pj as i64 + kx as i64 - half;
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            let m = (c * k + ky) * k + kx;
                            acc += f[(c * h + sy as usize) * w + sx as usize] * wts[m * co + o];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(&[co, oh, ow], out).unwrap()
}

/// `[C*r*r, H, W] -> [C, H*r, W*r]`, channel `c*r*r + a*r + b` landing on
/// sub-pixel `(a, b)`.
pub fn pixel_shuffle(x: &Tensor<f64>, r: usize) -> Tensor<f64> {
    let (crr, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c = crr / (r * r);
    let mut out = vec![0.0; crr * h * w];
    for ch in 0..c {
        for a in 0..r {
            for b in 0..r {
                for y in 0..h {
                    for xx in 0..w {
                        let src = ((ch * r * r + a * r + b) * h + y) * w + xx;
                        out[(ch * h * r + y * r + a) * w * r + xx * r + b] = x.data()[src];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h * r, w * r], out).unwrap()
}

/// Half-pixel-center bilinear resampling with edge clamping, one pixel at a time.
pub fn naive_bilinear(x: &Tensor<f64>, oh: usize, ow: usize, r: f64) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / r - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let t = if lo == n - 1 { 0.0 } else { s - lo as f64 };
        (lo, hi, t)
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, ty) = src(y, h);
            for xx in 0..ow {
                let (x0, x1, tx) = src(xx, w);
                let at = |a: usize, b: usize| x.data()[(ch * h + a) * w + b];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(ch * oh + y) * ow + xx] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).unwrap()
}

fn keys_cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized 1-based tap weights for output coordinate `o` (1-based),
/// with out-of-range taps reflected as `1..n, n..1`.
fn axis_taps(o: usize, n: usize, scale: f64) -> Vec<(usize, f64)> {
    let ks = scale.min(1.0);
    let width = 4.0 / ks;
    let u = o as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
    let mut taps = Vec::new();
    let first = (u - width / 2.0).floor() as i64;
    for j in first..=first + width.ceil() as i64 + 1 {
        let wt = ks * keys_cubic(ks * (u - j as f64));
        if wt == 0.0 {
            continue;
        }
        let mut m = (j - 1).rem_euclid(2 * n as i64);
        if m >= n as i64 {
            m = 2 * n as i64 - 1 - m;
        }
        taps.push((m as usize, wt));
    }
    let total: f64 = taps.iter().map(|t| t.1).sum();
    taps.into_iter().map(|(i, w)| (i, w / total)).collect()
}

/// Every output pixel as one explicit two-dimensional weighted sum, clamped.
pub fn direct_bicubic(img: &ImagePlane, oh: usize, ow: usize, scale: f64) -> ImagePlane {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0; ch * oh * ow];
    for c in 0..ch {
        for y in 0..oh {
            let ty = axis_taps(y + 1, h, scale);
            for x in 0..ow {
                let tx = axis_taps(x + 1, w, scale);
                let mut acc = 0.0;
                for &(a, wa) in &ty {
                    for &(b, wb) in &tx {
                        acc += wa * wb * img.at(c, a, b);
                    }
                }
                out[(c * oh + y) * ow + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    ImagePlane::new(oh, ow, img.colorspace(), out).unwrap()
}

/// Relative error of two gradient vectors, `|a - b| / max(|a|, |b|)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn test_net(in_c: usize, out_c: usize, hidden: usize, seed: u64) -> (WeightPredictionNet, ParamStore<f64>) {
    let mut cfg = WeightNetConfig::new(in_c, out_c);
    cfg.hidden = hidden;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = WeightPredictionNet::init(cfg, &mut store, "up", &mut rng).unwrap();
    (net, store)
}

/// Meta-upscale at integer r against r*r fixed convolutions followed by a
/// pixel shuffle. Returns the number of offset groups and the max difference.
pub fn pixel_shuffle_case(r: usize, seed: u64) -> (usize, f64) {
    let (ci, co, side) = (4, 3, 6);
    let (net, store) = test_net(ci, co, 24, seed);
    let f = random_tensor(&[ci, side, side], seed + 1);
    let scale = ScaleFactor::new(r as f64).unwrap();
    let groups = distinct_offsets(scale, side * r, side * r).len();
    let kdim = ci * 9;
    let mut stacked = vec![0.0; co * r * r * kdim];
    for a in 0..r {
        for b in 0..r {
            let flat = naive_mlp(&store, &net, &[a as f64 / r as f64, b as f64 / r as f64, 1.0 / r as f64]);
            for o in 0..co {
                for m in 0..kdim {
                    stacked[(o * r * r + a * r + b) * kdim + m] = flat[m * co + o];
                }
            }
        }
    }
    let kernel = Tensor::new(&[co * r * r, ci, 3, 3], stacked).unwrap();
    let expected = pixel_shuffle(&naive_conv(&f, &kernel, 1), r);
    let got = meta_upscale(&f, scale, &net, &store).unwrap();
    assert_eq!(got.shape(), expected.shape());
    (groups, max_abs_diff(got.data(), expected.data()))
}


/// Mean absolute error against a target pushed away from the output, so
/// the loss is smooth around the evaluation point.
fn separated_target(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = out
        .data()
        .iter()
        .map(|&v| {
            let gap = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                v + gap
            } else {
                v - gap
            }
        })
        .collect();
    Tensor::new(out.shape(), data).unwrap()
}

const FD_STEP: f64 = 1e-4;

/// Worst relative error over the gradients of every input of `build`.
pub fn check_inputs(inputs: &[Tensor<f64>], seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    let target = separated_target(tape.value(out), seed);
    let tv = tape.constant(target.clone());
    let loss = tape.l1_loss(out, tv).unwrap();
    let grads = tape.gradients(loss).unwrap();
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs);
        let tv = t.constant(target.clone());
        let l = t.l1_loss(o, tv).unwrap();
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input reached").to_vec();
        let mut xs = inputs.to_vec();
        let numeric = numeric_grad(inputs[k].data(), FD_STEP, |p| {
            xs[k].data_mut().copy_from_slice(p);
            eval(&xs)
        });
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Worst relative error over the parameter gradients of `build`, which
/// reads its parameters from `store`.
pub fn check_params(store: &ParamStore<f64>, seed: u64, build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) -> f64 {
    let mut tape = Tape::new();
    let out = build(&mut tape, store);
    let target = separated_target(tape.value(out), seed);
    let tv = tape.constant(target.clone());
    let loss = tape.l1_loss(out, tv).unwrap();
    let grads = tape.gradients(loss).unwrap();
    let analytic: Vec<(metasr::params::ParamId, Vec<f64>)> = grads.params().map(|(id, g)| (id, g.to_vec())).collect();
    assert_eq!(analytic.len(), store.len(), "every parameter reached");
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (id, g) in analytic {
        let x0 = store.get(id).data().to_vec();
        let numeric = numeric_grad(&x0, FD_STEP, |p| {
            work.get_mut(id).data_mut().copy_from_slice(p);
            let mut t = Tape::inference();
            let o = build(&mut t, &work);
            let tv = t.constant(target.clone());
            let l = t.l1_loss(o, tv).unwrap();
            t.value(l).data()[0]
        });
        work.get_mut(id).data_mut().copy_from_slice(&x0);
        worst = worst.max(rel_error(&g, &numeric));
    }
    worst
}

fn tiny_model(backend: Backend) -> MetaSr<f64> {
    let mut weight_net = WeightNetConfig::new(4, 3);
    weight_net.hidden = 6;
    let cfg = ModelConfig {
        features: FeatureNetConfig {
            num_blocks: 1,
            convs_per_block: 2,
            growth_rate: 3,
            feature_channels: 4,
            image_channels: 3,
            kernel_size: 3,
        },
        weight_net,
        backend,
    };
    MetaSr::init(cfg, 8).unwrap()
}

/// Finite-difference checks in double precision, one entry per operator
/// or composition.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push((
        "conv2d",
        check_inputs(
            &[random_tensor(&[3, 6, 5], 1), random_tensor(&[4, 3, 3, 3], 2), random_tensor(&[4], 3)],
            4,
            |t, v| t.conv2d_fused(&[v[0]], v[1], Some(v[2]), 1, false).unwrap(),
        ),
    ));
    out.push((
        "fully_connected",
        check_inputs(
            &[random_tensor(&[5, 4], 5), random_tensor(&[3, 4], 6), random_tensor(&[3], 7)],
            8,
            |t, v| t.linear(v[0], v[1], Some(v[2]), false).unwrap(),
        ),
    ));
    out.push((
        "relu",
        check_inputs(&[random_tensor(&[2, 5, 5], 9), random_tensor(&[3, 2, 3, 3], 10)], 12, |t, v| {
            let c = t.conv2d(v[0], v[1], 1).unwrap();
            t.relu(c)
        }),
    ));
    out.push((
        "linear+relu",
        check_inputs(
            &[random_tensor(&[6, 3], 13), random_tensor(&[5, 3], 14), random_tensor(&[5], 15)],
            16,
            |t, v| t.linear(v[0], v[1], Some(v[2]), true).unwrap(),
        ),
    ));
    out.push(("l1_loss", check_inputs(&[random_tensor(&[2, 4, 4], 17)], 18, |_, v| v[0])));
    out.push((
        "bilinear+conv",
        check_inputs(&[random_tensor(&[2, 5, 4], 19), random_tensor(&[3, 2, 3, 3], 20)], 21, |t, v| {
            let r = ScaleFactor::new(1.7).unwrap();
            metasr::meta_upscale::biconv_upscale_on_tape(t, v[0], r, v[1], None).unwrap()
        }),
    ));
    for (name, r, share) in [("meta_upscale r=1.7", 1.7, true), ("meta_upscale r=2", 2.0, true), ("meta_upscale per-pixel", 1.4, false)] {
        let (net, store) = test_net(3, 2, 8, 22);
        let features = random_tensor(&[3, 5, 6], 23);
        let r = ScaleFactor::new(r).unwrap();
        let theta = check_params(&store, 24, |t, s| {
            let f = t.constant(features.clone());
            meta_upscale_on_tape(t, s, &net, f, r, share).unwrap().output
        });
        let feat = check_inputs(&[features.clone()], 25, |t, v| {
            meta_upscale_on_tape(t, &store, &net, v[0], r, share).unwrap().output
        });
        out.push((name, theta.max(feat)));
    }
    {
        let (net, store) = test_net(4, 3, 8, 28);
        let features = random_tensor(&[4, 5, 5], 29);
        let r = ScaleFactor::new(2.3).unwrap();
        let theta = check_params(&store, 30, |t, s| {
            let f = t.constant(features.clone());
            let y = meta_upscale_on_tape(t, s, &net, f, r, true).unwrap().output;
            t.sum(y)
        });
        let feat = check_inputs(&[features.clone()], 31, |t, v| {
            let y = meta_upscale_on_tape(t, &store, &net, v[0], r, true).unwrap().output;
            t.sum(y)
        });
        out.push(("meta_upscale output sum", theta.max(feat)));
    }
    for (name, backend) in [("model meta", Backend::Meta), ("model biconv", Backend::BiConv), ("model metabi", Backend::MetaBi)] {
        let model = tiny_model(backend);
        let lr = random_tensor(&[3, 5, 5], 26).cast::<f64>();
        let lr = Tensor::new(lr.shape(), lr.data().iter().map(|v| 0.5 + 0.4 * v).collect()).unwrap();
        let r = ScaleFactor::new(1.6).unwrap();
        let worst = check_params(&model.store, 27, |t, s| {
            let m = MetaSr::from_store(model.config, s.clone()).unwrap();
            let x = t.constant(lr.clone());
            m.forward(t, x, r).unwrap().output
        });
        out.push((name, worst));
    }
    out
}

pub fn ramp_image(h: usize, w: usize) -> ImagePlane {
    let mut px = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                px.push(((y * w + x) as f64 + c as f64) / (h * w + 2) as f64);
            }
        }
    }
    ImagePlane::new(h, w, ColorSpace::Rgb, px).unwrap()
}

/// Largest difference between the production resize and the direct
/// two-dimensional evaluation over a ramp and several random images.
pub fn bicubic_oracle_diff() -> f64 {
    let mut worst: f64 = 0.0;
    let mut cases = vec![(ramp_image(8, 8), 0.5)];
    for (k, &s) in [0.5, 0.3, 0.75, 1.7, 2.5, 3.3, 4.0].iter().enumerate() {
        cases.push((random_image(13, 11, 70 + k as u64), s));
    }
    for (img, s) in cases {
        let r = ScaleFactor::new(s).unwrap();
        let (oh, ow) = (r.output_len(img.height()), r.output_len(img.width()));
        let got = bicubic_resize(&img, s).unwrap();
        let want = direct_bicubic(&img, oh, ow, s);
        worst = worst.max(max_abs_diff(got.pixels(), want.pixels()));
    }
    worst
}

/// Largest deviation from the input value when resizing constant images,
/// both directly and down-then-up.
pub fn bicubic_constant_deviation() -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &v) in [0.0, 0.2, 0.73, 1.0].iter().enumerate() {
        let img = ImagePlane::filled(17 + k, 12 + 2 * k, ColorSpace::Rgb, v).unwrap();
        for s in [0.25, 0.5, 0.7, 1.3, 2.0, 3.7] {
            let once = bicubic_resize(&img, s).unwrap();
            let back = bicubic_resize_to(&once, img.height(), img.width(), 1.0 / s).unwrap();
            for p in once.pixels().iter().chain(back.pixels()) {
                worst = worst.max((p - v).abs());
            }
        }
    }
    worst
}

/// Scale one returns the input unchanged, bit for bit.
pub fn bicubic_unit_scale_exact() -> bool {
    (0..4).all(|k| {
        let img = random_image(9 + k, 14 - k, 90 + k as u64);
        bicubic_resize(&img, 1.0).unwrap() == img
    })
}
