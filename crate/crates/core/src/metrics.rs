//! PSNR and SSIM on the luma channel, computed the way the SR literature's
//! MATLAB scripts do: 8-bit RGB, studio-swing Y rounded to 8-bit levels,
//! and a border of `ceil(r)` pixels excluded.

use crate::data::image::{ColorSpace, ImagePlane};
use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// BT.601 studio-swing transform (MATLAB `rgb2ycbcr`), on `[0, 1]` values.
pub fn rgb_to_ycbcr(img: &ImagePlane) -> Result<ImagePlane> {
    if img.colorspace() != ColorSpace::Rgb {
        return Err(Error::InvalidArgument(format!(
            "rgb_to_ycbcr needs a 3-channel RGB image, got {:?}",
            img.colorspace()
        )));
    }
    let n = img.height() * img.width();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        out[i] = (16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0;
        out[n + i] = (128.0 - 37.797 * r[i] - 74.203 * g[i] + 112.0 * b[i]) / 255.0;
        out[2 * n + i] = (128.0 + 112.0 * r[i] - 93.786 * g[i] - 18.214 * b[i]) / 255.0;
    }
    ImagePlane::new(img.height(), img.width(), ColorSpace::YCbCr, out)
}

/// Luma on 8-bit levels. RGB input is quantized to 8 bits first, as if it
/// had been written to and read back from a PNG.
pub fn luma_8bit(img: &ImagePlane) -> Result<Vec<f64>> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    let y: Vec<f64> = match img.colorspace() {
        ColorSpace::Rgb => {
            let rgb = img.clone().quantize();
            rgb_to_ycbcr(&rgb)?.plane(0).to_vec()
        }
        ColorSpace::YCbCr | ColorSpace::Y => img.plane(0).to_vec(),
    };
    Ok(y.into_iter().map(q).collect())
}

/// Border excluded from metrics at scale `r`.
pub fn shave_for(scale: f64) -> usize {
    scale.ceil().max(0.0) as usize
}

struct Luma {
    h: usize,
    w: usize,
    y: Vec<f64>,
}

fn shaved_pair(sr: &ImagePlane, hr: &ImagePlane, shave: usize, op: &'static str) -> Result<(Luma, Luma)> {
    if (sr.height(), sr.width()) != (hr.height(), hr.width()) {
        return Err(Error::shape(
            op,
            format!(
                "SR is {}x{} but HR is {}x{}",
                sr.height(),
                sr.width(),
                hr.height(),
                hr.width()
            ),
        ));
    }
    let (h, w) = (sr.height(), sr.width());
    if 2 * shave >= h || 2 * shave >= w {
        return Err(Error::InvalidArgument(format!("shaving {shave} pixels leaves nothing of a {h}x{w} image")));
    }
    let crop = |img: &ImagePlane| -> Result<Luma> {
        let y = luma_8bit(img)?;
        let (ih, iw) = (h - 2 * shave, w - 2 * shave);
        let mut out = Vec::with_capacity(ih * iw);
        for r in shave..h - shave {
            out.extend_from_slice(&y[r * w + shave..r * w + w - shave]);
        }
        Ok(Luma { h: ih, w: iw, y: out })
    };
    Ok((crop(sr)?, crop(hr)?))
}

/// PSNR in dB with peak 1. Identical inputs give `f64::INFINITY`.
pub fn psnr_y(sr: &ImagePlane, hr: &ImagePlane, shave: usize) -> Result<f64> {
    let (a, b) = shaved_pair(sr, hr, shave, "psnr_y")?;
    let mse = a.y.iter().zip(&b.y).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.y.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' correlation with the normalized Gaussian window.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|t| g[t] * x[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| g[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-covered 11x11 windows.
pub fn ssim_y(sr: &ImagePlane, hr: &ImagePlane, shave: usize) -> Result<f64> {
    let (a, b) = shaved_pair(sr, hr, shave, "ssim_y")?;
    let (h, w) = (a.h, a.w);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} after shaving is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_x = filter_valid(&a.y, h, w, &g);
    let mu_y = filter_valid(&b.y, h, w, &g);
    let xx = filter_valid(&prod(&a.y, &a.y), h, w, &g);
    let yy = filter_valid(&prod(&b.y, &b.y), h, w, &g);
    let xy = filter_valid(&prod(&a.y, &b.y), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = xx[i] - mx * mx;
        let syy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Center-crops both images to their common size.
pub fn align_pair(sr: &ImagePlane, hr: &ImagePlane) -> Result<(ImagePlane, ImagePlane)> {
    let h = sr.height().min(hr.height());
    let w = sr.width().min(hr.width());
    Ok((sr.center_crop(h, w)?, hr.center_crop(h, w)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

/// Aligns sizes, shaves `ceil(r)` and returns both metrics.
pub fn evaluate_pair(sr: &ImagePlane, hr: &ImagePlane, scale: f64) -> Result<Quality> {
    let (sr, hr) = align_pair(sr, hr)?;
    let shave = shave_for(scale);
    Ok(Quality {
        psnr: psnr_y(&sr, &hr, shave)?,
        ssim: ssim_y(&sr, &hr, shave)?,
    })
}
