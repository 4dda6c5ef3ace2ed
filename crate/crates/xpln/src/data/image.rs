//! In-memory images and 8-bit file IO.
//!
//! Pixels live as f32 in [0, 1], channel-major. Files are binary PGM (one
//! channel) or PPM (three channels) with a canonical header, so a
//! write/read/write cycle is byte-identical; PNG is supported read-only.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major values in [0, 1], `channels * height * width` long.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Mean across channels at one pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f32 {
        (0..self.channels).map(|c| self.at(c, y, x)).sum::<f32>() / self.channels as f32
    }

    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.data.iter().map(|&v| S::from_f64(v as f64)).collect();
        Tensor::leaf(&[self.channels, self.height, self.width], data)
            .expect("image dimensions always form a valid tensor shape")
    }

    /// Read PGM/PPM/PNG by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") | Some("ppm") => Self::read_pnm(path),
            Some("png") => Self::read_png(path),
            other => Err(Error::Format(format!(
                "{}: unsupported image extension {:?}",
                path.display(),
                other.unwrap_or("none")
            ))),
        }
    }

    /// Write PGM (1 channel) or PPM (3 channels) with a canonical header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(Error::Format(format!(
                    "cannot write {c}-channel image as PGM/PPM"
                )))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)
            .map_err(|e| Error::io(path, e))?;
        let mut row = Vec::with_capacity(self.width * self.channels);
        for y in 0..self.height {
            row.clear();
            for x in 0..self.width {
                for c in 0..self.channels {
                    row.push(quantize(self.at(c, y, x)));
                }
            }
            w.write_all(&row).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn read_pnm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(bad("not a binary PGM/PPM file")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // skip whitespace and '#' comment lines between header fields
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
            *field = text.parse().map_err(|_| bad("malformed header field"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        if width == 0 || height == 0 {
            return Err(bad("zero image dimension"));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height * channels;
        let raster = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
        let mut img = Image::new(channels, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = raster[(y * width + x) * channels + c];
                    *img.at_mut(c, y, x) = v as f32 / 255.0;
                }
            }
        }
        Ok(img)
    }

    fn read_png(path: &Path) -> Result<Self> {
        let decoded = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (width, height) = (decoded.width() as usize, decoded.height() as usize);
        match decoded {
            image::DynamicImage::ImageLuma8(buf) => {
                let mut img = Image::new(1, height, width);
                for (i, p) in buf.pixels().enumerate() {
                    img.data[i] = p.0[0] as f32 / 255.0;
                }
                Ok(img)
            }
            other => {
                let buf = other.to_rgb8();
                let mut img = Image::new(3, height, width);
                for (i, p) in buf.pixels().enumerate() {
                    for c in 0..3 {
                        img.data[c * height * width + i] = p.0[c] as f32 / 255.0;
                    }
                }
                Ok(img)
            }
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize) -> Image {
        let (h, w) = (5, 7);
        let mut img = Image::new(channels, h, w);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    *img.at_mut(c, y, x) = ((c * 89 + y * 13 + x * 31) % 256) as f32 / 255.0;
                }
            }
        }
        img
    }

    #[test]
    fn pgm_write_read_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let ext = if channels == 1 { "pgm" } else { "ppm" };
            let a = dir.path().join(format!("a.{ext}"));
            let b = dir.path().join(format!("b.{ext}"));
            let img = ramp(channels);
            img.save(&a).unwrap();
            let loaded = Image::load(&a).unwrap();
            loaded.save(&b).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
            assert_eq!(loaded.channels, channels);
            assert_eq!((loaded.height, loaded.width), (5, 7));
        }
    }

    #[test]
    fn pnm_comments_and_whitespace_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n 3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 10, 20, 30]);
        std::fs::write(&p, &bytes).unwrap();
        let img = Image::load(&p).unwrap();
        assert_eq!((img.height, img.width), (2, 3));
        assert_eq!(img.at(0, 0, 1), 128.0 / 255.0);
        assert_eq!(img.at(0, 1, 2), 30.0 / 255.0);
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\nabc").unwrap();
        assert!(matches!(Image::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn png_round_trips_through_the_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = ramp(1);
        // encode with the same library used for reading
        let mut buf = image::GrayImage::new(img.width as u32, img.height as u32);
        for y in 0..img.height {
            for x in 0..img.width {
                buf.put_pixel(x as u32, y as u32, image::Luma([quantize(img.at(0, y, x))]));
            }
        }
        buf.save(&p).unwrap();
        let loaded = Image::load(&p).unwrap();
        assert_eq!(loaded, {
            let mut q = img.clone();
            for v in &mut q.data {
                *v = quantize(*v) as f32 / 255.0;
            }
            q
        });
    }

    #[test]
    fn tensor_conversion_keeps_layout() {
        let img = ramp(3);
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.shape(), &[3, 5, 7]);
        let v = t.data()[(2 * 5 + 4) * 7 + 6];
        assert!((v - img.at(2, 4, 6) as f64).abs() < 1e-9);
    }
}
