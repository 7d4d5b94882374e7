//! Raw images as channel-major `f32` planes with values nominally in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let shape = ImageShape {
            channels,
            height,
            width,
        };
        if shape.is_empty() {
            return Err(Error::validation(format!("image shape {shape} is empty")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape("image buffer", shape.len(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("image contains non-finite pixels"));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = (c * self.shape.height + y) * self.shape.width + x;
        self.data[i] = v;
    }

    /// Bilinear sample with edge clamping; coordinates in pixel units.
    pub fn sample_bilinear(&self, c: usize, y: f32, x: f32) -> f32 {
        let h = self.shape.height as isize;
        let w = self.shape.width as isize;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
        let (x0i, y0i) = (x0 as isize, y0 as isize);
        let xa = clamp(x0i, w);
        let xb = clamp(x0i + 1, w);
        let ya = clamp(y0i, h);
        let yb = clamp(y0i + 1, h);
        let top = self.at(c, ya, xa) * (1.0 - fx) + self.at(c, ya, xb) * fx;
        let bottom = self.at(c, yb, xa) * (1.0 - fx) + self.at(c, yb, xb) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if height == self.shape.height && width == self.shape.width {
            return self.clone();
        }
        let shape = ImageShape {
            channels: self.shape.channels,
            height,
            width,
        };
        let sy = self.shape.height as f32 / height as f32;
        let sx = self.shape.width as f32 / width as f32;
        let mut out = Image::filled(shape, 0.0);
        for c in 0..shape.channels {
            for y in 0..height {
                let src_y = (y as f32 + 0.5) * sy - 0.5;
                for x in 0..width {
                    let src_x = (x as f32 + 0.5) * sx - 0.5;
                    out.set(c, y, x, self.sample_bilinear(c, src_y, src_x));
                }
            }
        }
        out
    }

    /// Grey to colour replicates the plane; colour to grey averages.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        let from = self.shape.channels;
        if from == channels {
            return Ok(self.clone());
        }
        let plane = self.shape.height * self.shape.width;
        let shape = ImageShape {
            channels,
            ..self.shape
        };
        let data = match (from, channels) {
            (1, n) => (0..n).flat_map(|_| self.data.iter().copied()).collect(),
            (n, 1) => (0..plane)
                .map(|i| (0..n).map(|c| self.data[c * plane + i]).sum::<f32>() / n as f32)
                .collect(),
            _ => {
                return Err(Error::validation(format!(
                    "cannot convert a {from}-channel image to {channels} channels"
                )))
            }
        };
        Ok(Image { shape, data })
    }

    /// Loads PNG/JPEG from disk as grey (`channels == 1`) or RGB (`3`).
    pub fn load(path: &Path, channels: usize) -> Result<Image> {
        let dynamic = image::open(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: None,
            message: format!("cannot decode image: {e}"),
        })?;
        match channels {
            1 => {
                let g = dynamic.to_luma8();
                let (w, h) = g.dimensions();
                let data = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
                Image::new(1, h as usize, w as usize, data)
            }
            3 => {
                let rgb = dynamic.to_rgb8();
                let (w, h) = rgb.dimensions();
                let plane = (w * h) as usize;
                let mut data = vec![0.0; 3 * plane];
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * plane + i] = p.0[c] as f32 / 255.0;
                    }
                }
                Image::new(3, h as usize, w as usize, data)
            }
            n => Err(Error::validation(format!("unsupported channel count {n}"))),
        }
    }

    /// Writes an 8-bit PNG (values are clamped to `[0, 1]`).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let ImageShape {
            channels,
            height,
            width,
        } = self.shape;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (width as u32, height as u32);
        let result = match channels {
            1 => {
                let img: GrayImage = ImageBuffer::from_fn(w, h, |x, y| {
                    Luma([q(self.at(0, y as usize, x as usize))])
                });
                img.save(path)
            }
            3 => {
                let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    Rgb([
                        q(self.at(0, y, x)),
                        q(self.at(1, y, x)),
                        q(self.at(2, y, x)),
                    ])
                });
                img.save(path)
            }
            n => return Err(Error::validation(format!("cannot save {n}-channel image"))),
        };
        result.map_err(|e| Error::Encoder {
            encoder: "png".into(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| i as f32 / (h * w) as f32).collect();
        Image::new(1, h, w, data).unwrap()
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ramp(4, 6);
        assert_eq!(img.resized(4, 6), img);
    }

    #[test]
    fn constant_image_survives_resize() {
        let img = Image::filled(
            ImageShape {
                channels: 1,
                height: 5,
                width: 7,
            },
            0.25,
        );
        let r = img.resized(9, 3);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn channel_conversion() {
        let img = ramp(2, 2);
        let rgb = img.with_channels(3).unwrap();
        assert_eq!(rgb.shape().channels, 3);
        let back = rgb.with_channels(1).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = ramp(3, 5);
        img.save_png(&p).unwrap();
        let back = Image::load(&p, 1).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
