//! In-memory raster types: single-channel grids of normalized intensities
//! and planar multi-channel images, plus PNG encode/decode.
//!
//! Intensities live in `[0, 1]`. Pixel centers sit at integer coordinates,
//! so bilinear sampling at `(x, y)` with integral `x`, `y` returns the
//! stored sample exactly.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("sample count {got} does not match {width}x{height}")]
    BadDimensions { width: usize, height: usize, got: usize },
    #[error("channel {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    ChannelSizeMismatch { index: usize, want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("image i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode failed: {0}")]
    Decode(#[from] image::ImageError),
}

/// Single-channel image, row-major samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    samples: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, samples: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, samples: vec![value; width * height] }
    }

    pub fn from_samples(width: usize, height: usize, samples: Vec<f64>) -> Result<Self, RasterError> {
        if samples.len() != width * height {
            return Err(RasterError::BadDimensions { width, height, got: samples.len() });
        }
        Ok(Self { width, height, samples })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.samples[y * self.width + x] = v;
    }

    /// Bilinear sample with pixel centers at integer coordinates.
    /// Locations outside the grid contribute zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let fetch = |ix: i64, iy: i64| -> f64 {
            if ix < 0 || iy < 0 || ix >= self.width as i64 || iy >= self.height as i64 {
                0.0
            } else {
                self.samples[iy as usize * self.width + ix as usize]
            }
        };
        let x0 = x0 as i64;
        let y0 = y0 as i64;
        fetch(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + fetch(x0 + 1, y0) * fx * (1.0 - fy)
            + fetch(x0, y0 + 1) * (1.0 - fx) * fy
            + fetch(x0 + 1, y0 + 1) * fx * fy
    }
}

/// Multi-channel image stored as equally sized planes (1 = grayscale,
/// 3 = color). Channels are processed independently downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    planes: Vec<GrayImage>,
}

impl PlanarImage {
    pub fn new(planes: Vec<GrayImage>) -> Result<Self, RasterError> {
        assert!(!planes.is_empty(), "image needs at least one plane");
        let (w, h) = (planes[0].width(), planes[0].height());
        for (i, p) in planes.iter().enumerate().skip(1) {
            if p.width() != w || p.height() != h {
                return Err(RasterError::ChannelSizeMismatch {
                    index: i,
                    want_w: w,
                    want_h: h,
                    got_w: p.width(),
                    got_h: p.height(),
                });
            }
        }
        Ok(Self { planes })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { planes: (0..channels).map(|_| GrayImage::filled(width, height, value)).collect() }
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, i: usize) -> &GrayImage {
        &self.planes[i]
    }

    pub fn plane_mut(&mut self, i: usize) -> &mut GrayImage {
        &mut self.planes[i]
    }

    pub fn planes(&self) -> &[GrayImage] {
        &self.planes
    }

    /// Encode as an 8-bit PNG (grayscale for 1 plane, RGB for 3).
    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let w = self.width() as u32;
        let h = self.height() as u32;
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels() {
            1 => {
                let mut buf = image::GrayImage::new(w, h);
                for (x, y, px) in buf.enumerate_pixels_mut() {
                    px.0 = [quant(self.planes[0].get(x as usize, y as usize))];
                }
                buf.save_with_format(path, image::ImageFormat::Png)?;
            }
            3 => {
                let mut buf = image::RgbImage::new(w, h);
                for (x, y, px) in buf.enumerate_pixels_mut() {
                    px.0 = [
                        quant(self.planes[0].get(x as usize, y as usize)),
                        quant(self.planes[1].get(x as usize, y as usize)),
                        quant(self.planes[2].get(x as usize, y as usize)),
                    ];
                }
                buf.save_with_format(path, image::ImageFormat::Png)?;
            }
            n => return Err(RasterError::UnsupportedChannels(n)),
        }
        Ok(())
    }

    /// Decode an 8-bit raster into normalized planes. Gray sources give one
    /// plane, color sources three (alpha dropped).
    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(gray) => {
                let mut plane = GrayImage::new(w, h);
                for (x, y, px) in gray.enumerate_pixels() {
                    plane.set(x as usize, y as usize, px.0[0] as f64 / 255.0);
                }
                PlanarImage::new(vec![plane])
            }
            other => {
                let rgb = other.to_rgb8();
                let mut planes = vec![GrayImage::new(w, h); 3];
                for (x, y, px) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        planes[c].set(x as usize, y as usize, px.0[c] as f64 / 255.0);
                    }
                }
                PlanarImage::new(planes)
            }
        }
    }
}
