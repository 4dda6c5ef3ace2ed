//! Geometry and intensity normalization applied before the network sees an
//! image: crop to the usable field of view, resize to the working resolution,
//! then flatten illumination by subtracting a heavily blurred copy.

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Side of the square working resolution.
    pub target: usize,
    /// FOV threshold as a fraction of the brightest pixel.
    pub fov_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target: 64, fov_threshold: 0.05 }
    }
}

/// Contrast gain applied after background subtraction. Kept low enough that
/// typical lesion contrasts stay inside the displayable range instead of
/// clipping, so absolute tone still separates lesion kinds downstream.
const GAIN: f32 = 2.0;
/// Intensities are re-centered here.
const MID: f32 = 0.5;

pub fn preprocess(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    let (y0, y1, x0, x1) = fov_bbox(img, cfg.fov_threshold)?;
    let cropped = crop(img, y0, y1, x0, x1);
    let resized = resize_bilinear(&cropped, cfg.target, cfg.target);
    Ok(normalize(&resized))
}

/// Inclusive bounding box of pixels whose luminance clears the threshold.
pub(crate) fn fov_bbox(img: &Image, threshold: f64) -> Result<(usize, usize, usize, usize)> {
    let mut max_v = 0.0f32;
    for y in 0..img.height {
        for x in 0..img.width {
            max_v = max_v.max(img.luminance(y, x));
        }
    }
    if max_v <= 0.0 {
        return Err(Error::Numeric("field of view empty: image is entirely black".into()));
    }
    let thr = max_v * threshold as f32;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            if img.luminance(y, x) >= thr {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    Ok((y0, y1, x0, x1))
}

fn crop(img: &Image, y0: usize, y1: usize, x0: usize, x1: usize) -> Image {
    let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut out = Image::new(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(c, y, x) = img.at(c, y0 + y, x0 + x);
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let mut out = Image::new(img.channels, height, width);
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, img.height as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, img.width as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..img.channels {
                let top = img.at(c, y0, x0) * (1.0 - wx) + img.at(c, y0, x1) * wx;
                let bot = img.at(c, y1, x0) * (1.0 - wx) + img.at(c, y1, x1) * wx;
                *out.at_mut(c, y, x) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Separable Gaussian blur; truncated kernels are renormalized at the
/// borders, so blurring a constant plane returns it unchanged.
pub(crate) fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let mut horizontal = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (k, &wt) in weights.iter().enumerate() {
                let xi = x as i64 + (k as i64 - radius);
                if xi >= 0 && xi < w as i64 {
                    acc += wt * plane[y * w + xi as usize];
                    norm += wt;
                }
            }
            horizontal[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (k, &wt) in weights.iter().enumerate() {
                let yi = y as i64 + (k as i64 - radius);
                if yi >= 0 && yi < h as i64 {
                    acc += wt * horizontal[yi as usize * w + x];
                    norm += wt;
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

fn normalize(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let sigma = w as f64 / 30.0;
    let mut out = img.clone();
    for c in 0..img.channels {
        let plane = &img.data[c * h * w..(c + 1) * h * w];
        let blur = gaussian_blur(plane, h, w, sigma);
        for i in 0..h * w {
            out.data[c * h * w + i] = (GAIN * (plane[i] - blur[i]) + MID).clamp(0.0, 1.0);
        }
    }
    out
}
