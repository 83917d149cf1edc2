//! Bicubic resampling that follows MATLAB's `imresize` defaults: cubic
//! kernel with `a = -0.5`, kernel widened by `1/scale` when shrinking
//! (antialiasing), symmetric edge handling and per-row weight normalization.

use crate::data::image::ImagePlane;
use crate::error::{Error, Result};
use crate::meta_upscale::ScaleFactor;

pub fn cubic(x: f64) -> f64 {
    let a = x.abs();
    let a2 = a * a;
    let a3 = a2 * a;
    if a <= 1.0 {
        1.5 * a3 - 2.5 * a2 + 1.0
    } else if a <= 2.0 {
        -0.5 * a3 + 2.5 * a2 - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Sparse resampling matrix along one axis: output `o` reads
/// `indices[o][t]` with weight `weights[o][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contributions {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Mirror index into `[0, len)` using the symmetric `1..n, n..1` pattern.
fn mirror(i: i64, len: usize) -> usize {
    let period = 2 * len as i64;
    let m = i.rem_euclid(period);
    if m < len as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

pub fn contributions(in_len: usize, out_len: usize, scale: f64) -> Contributions {
    let (kernel_scale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let taps = width.ceil() as i64 + 2;
    let mut indices = Vec::with_capacity(out_len);
    let mut weights = Vec::with_capacity(out_len);
    for o in 0..out_len {
        // 1-based output coordinate mapped into 1-based input space.
        let u = (o + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as i64;
        let mut idx = Vec::with_capacity(taps as usize);
        let mut w = Vec::with_capacity(taps as usize);
        for t in 0..taps {
            let j = left + t;
            let wt = kernel_scale * cubic(kernel_scale * (u - j as f64));
            if wt != 0.0 {
                idx.push(mirror(j - 1, in_len));
                w.push(wt);
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        indices.push(idx);
        weights.push(w);
    }
    Contributions { indices, weights }
}

fn resize_axis(img: &ImagePlane, out_len: usize, scale: f64, vertical: bool) -> ImagePlane {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let in_len = if vertical { h } else { w };
    let contrib = contributions(in_len, out_len, scale);
    let (oh, ow) = if vertical { (out_len, w) } else { (h, out_len) };
    let mut out = vec![0.0; ch * oh * ow];
    for c in 0..ch {
        let src = img.plane(c);
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        if vertical {
            for (o, (idx, wt)) in contrib.indices.iter().zip(&contrib.weights).enumerate() {
                let row = &mut dst[o * ow..(o + 1) * ow];
                for (&i, &wv) in idx.iter().zip(wt) {
                    for (d, &s) in row.iter_mut().zip(&src[i * w..(i + 1) * w]) {
                        *d += wv * s;
                    }
                }
            }
        } else {
            for y in 0..h {
                let line = &src[y * w..(y + 1) * w];
                for (o, (idx, wt)) in contrib.indices.iter().zip(&contrib.weights).enumerate() {
                    dst[y * ow + o] = idx.iter().zip(wt).map(|(&i, &wv)| wv * line[i]).sum();
                }
            }
        }
    }
    ImagePlane::new(oh, ow, img.colorspace(), out).expect("consistent dims")
}

/// Resizes to an explicit size, using `scale` for the coordinate mapping.
/// Rows are resampled first, then columns; the result is clamped to [0, 1].
pub fn bicubic_resize_to(img: &ImagePlane, out_h: usize, out_w: usize, scale: f64) -> Result<ImagePlane> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("resize scale must be positive, got {scale}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resizing {}x{} by {scale} gives an empty image",
            img.height(),
            img.width()
        )));
    }
    if scale == 1.0 && out_h == img.height() && out_w == img.width() {
        return Ok(img.clone());
    }
    let tmp = resize_axis(img, out_h, scale, true);
    Ok(resize_axis(&tmp, out_w, scale, false).clamp())
}

/// Output size is `floor(dims * scale)`.
pub fn bicubic_resize(img: &ImagePlane, scale: f64) -> Result<ImagePlane> {
    let s = ScaleFactor::new(scale)?;
    bicubic_resize_to(img, s.output_len(img.height()), s.output_len(img.width()), scale)
}
