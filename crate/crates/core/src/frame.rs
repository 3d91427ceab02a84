//! In-memory RGB frames and PNG conversion.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::ImageFormat;

use crate::error::{shape_err, Error, Result};

/// An RGB image stored row-major as `h * w * 3` floats in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return shape_err(format!(
                "frame {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mse(&self, other: &Frame) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("frame buffer size".into()))?;
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self { height: h as usize, width: w as usize, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let mut out = Frame::filled(height, width, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let sy = y * self.height / height;
                let sx = x * self.width / width;
                out.set_pixel(y, x, self.pixel(sy, sx));
            }
        }
        out
    }
}

/// Stacks frames into a (B, h, w, 3) tensor.
pub fn frames_to_tensor(frames: &[&Frame], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = frames.first() else {
        return shape_err("empty frame batch");
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in frames {
        if f.height != h || f.width != w {
            return shape_err(format!(
                "mixed frame sizes {}x{} and {h}x{w}",
                f.height, f.width
            ));
        }
        data.extend_from_slice(&f.data);
    }
    Ok(Tensor::from_vec(data, (frames.len(), h, w, 3), device)?.to_dtype(dtype)?)
}

/// Splits a (B, h, w, 3) tensor back into frames.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (b, h, w, c) = t.dims4()?;
    if c != 3 {
        return shape_err(format!("expected 3 channels, got {c}"));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks(h * w * 3)
        .take(b)
        .map(|chunk| Frame { height: h, width: w, data: chunk.to_vec() })
        .collect())
}
