use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Y,
    YCbCr,
}

/// A planar image (`[C, H, W]`) with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    colorspace: ColorSpace,
    pixels: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, colorspace: ColorSpace, pixels: Vec<f64>) -> Result<Self> {
        let channels = match colorspace {
            ColorSpace::Y => 1,
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
        };
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty image {height}x{width}")));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{} values for a {channels}x{height}x{width} image", pixels.len()),
            ));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            colorspace,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, colorspace: ColorSpace, value: f64) -> Result<Self> {
        let c = if colorspace == ColorSpace::Y { 1 } else { 3 };
        Self::new(height, width, colorspace, vec![value; c * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn clamp(mut self) -> Self {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Rounds to the nearest of 256 levels, as if written to an 8-bit file.
    pub fn quantize(mut self) -> Self {
        self.pixels
            .iter_mut()
            .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        self
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w}+{y}+{x} outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for yy in y..y + h {
                let row = (c * self.height + yy) * self.width;
                out.extend_from_slice(&self.pixels[row + x..row + x + w]);
            }
        }
        Self::new(h, w, self.colorspace, out)
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        if h > self.height || w > self.width {
            return Err(Error::InvalidArgument(format!("center crop {h}x{w} of {}x{}", self.height, self.width)));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = Vec::with_capacity(self.pixels.len());
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = src(y, x);
                    out.push(self.at(c, sy, sx));
                }
            }
        }
        Self::new(h, w, self.colorspace, out).expect("same pixel count")
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.remap(self.height, w, |y, x| (y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        self.remap(h, self.width, |y, x| (h - 1 - y, x))
    }

    /// Rotation by 90 degrees counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let w = self.width;
        self.remap(w, self.height, |y, x| (x, w - 1 - y))
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&v| T::from_f64_lossy(v)).collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("valid image")
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>, colorspace: ColorSpace) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("image", format!("tensor {s:?} is not [C,H,W]")));
        }
        Self::new(s[1], s[2], colorspace, t.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Reads an 8-bit image; grayscale inputs are expanded to RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
            }
        }
        Self::new(h, w, ColorSpace::Rgb, pixels)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let px = |c: usize| q(self.at(c.min(self.channels - 1), y, x));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes an 8-bit PNG (single-channel images are replicated to RGB).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}
