use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`, stored row-major as H×W×3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

/// Geometry of a [`ImageSample::resize_fit`] call, for mapping boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeInfo {
    pub scale: f64,
    pub new_h: usize,
    pub new_w: usize,
}

impl ResizeInfo {
    pub fn map_box(&self, b: [f64; 4]) -> [f64; 4] {
        let s = self.scale;
        let (w, h) = (self.new_w as f64, self.new_h as f64);
        [
            (b[0] * s).clamp(0.0, w),
            (b[1] * s).clamp(0.0, h),
            (b[2] * s).clamp(0.0, w),
            (b[3] * s).clamp(0.0, h),
        ]
    }
}

pub const MIN_SIDE: usize = 8;

impl ImageSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} pixel values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(id, height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Channel-major `3×H×W` tensor.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f64;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data)
    }

    fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (ly, lx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let top = self.get(y0, x0, c) * (1.0 - lx) + self.get(y0, x1, c) * lx;
        let bot = self.get(y1, x0, c) * (1.0 - lx) + self.get(y1, x1, c) * lx;
        top * (1.0 - ly) + bot * ly
    }

    /// Scales to fit inside `out_h × out_w` preserving aspect ratio (bilinear,
    /// half-pixel centers), placing the result at the top-left and padding
    /// the remainder with zeros.
    pub fn resize_fit(&self, out_h: usize, out_w: usize) -> (ImageSample, ResizeInfo) {
        let scale = (out_h as f64 / self.height as f64).min(out_w as f64 / self.width as f64);
        let new_h = ((self.height as f64 * scale).round() as usize).clamp(1, out_h);
        let new_w = ((self.width as f64 * scale).round() as usize).clamp(1, out_w);
        let info = ResizeInfo { scale, new_h, new_w };
        if new_h == self.height && new_w == self.width && out_h == self.height && out_w == self.width {
            return (self.clone(), info);
        }
        let mut pixels = vec![0.0f32; out_h * out_w * 3];
        let sy = self.height as f64 / new_h as f64;
        let sx = self.width as f64 / new_w as f64;
        for y in 0..new_h {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..new_w {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..3 {
                    pixels[(y * out_w + x) * 3 + c] = self.sample_bilinear(src_y, src_x, c).clamp(0.0, 1.0);
                }
            }
        }
        let img = ImageSample {
            id: self.id.clone(),
            height: out_h,
            width: out_w,
            pixels,
        };
        (img, info)
    }

    pub fn load(path: &Path, id: impl Into<String>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(id, h, w, pixels)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("pixel buffer matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}
