use std::path::Path;

use crate::error::{Error, Result};

use super::spec::SceneSpec;

/// An RGB image in `[0, 1]`, stored row-major as `H x W x 3`, plus the
/// annotations the renderer knows about it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub provenance: Option<SceneSpec>,
    pub face_mask: Option<Vec<bool>>,
    pub chin_landmarks: Option<Vec<[f64; 2]>>,
}

impl SceneImage {
    /// Wraps raw pixels; every value must be finite and in `[0, 1]`.
    pub fn from_pixels(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "expected {} pixel values for a {size}x{size} RGB image, got {}",
                size * size * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation("pixels", format!("value {bad} outside [0, 1]")));
        }
        Ok(Self {
            size,
            pixels,
            provenance: None,
            face_mask: None,
            chin_landmarks: None,
        })
    }

    pub fn filled(size: usize, color: [f32; 3]) -> Self {
        let pixels = (0..size * size).flat_map(|_| color).collect();
        Self::from_pixels(size, pixels).expect("fill colour in range")
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f32; 3] {
        let b = (row * self.size + col) * 3;
        [self.pixels[b], self.pixels[b + 1], self.pixels[b + 2]]
    }

    pub fn set_pixel(&mut self, col: usize, row: usize, c: [f32; 3]) {
        let b = (row * self.size + col) * 3;
        self.pixels[b..b + 3].copy_from_slice(&c);
    }

    /// Drops provenance and annotations, keeping only pixels.
    pub fn strip(mut self) -> Self {
        self.provenance = None;
        self.face_mask = None;
        self.chin_landmarks = None;
        self
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_rgb8(size: usize, data: &[u8]) -> Result<Self> {
        Self::from_pixels(size, data.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// The same image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.pixels = self.to_rgb8().iter().map(|&b| b as f32 / 255.0).collect();
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut buf);
        image::ImageEncoder::write_image(
            enc,
            &self.to_rgb8(),
            self.size as u32,
            self.size as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(buf)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Decodes a square image. Non-square images are rejected.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::Resolution {
                got_w: w as usize,
                got_h: h as usize,
                want: w.max(h) as usize,
            });
        }
        Self::from_rgb8(w as usize, img.as_raw())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    /// Box-filter downscale by an integer factor.
    pub fn downscale(&self, target: usize) -> Result<Self> {
        if target == 0 || self.size % target != 0 {
            return Err(Error::Resolution {
                got_w: self.size,
                got_h: self.size,
                want: target,
            });
        }
        let f = self.size / target;
        let norm = (f * f) as f32;
        let mut px = vec![0f32; target * target * 3];
        for r in 0..target {
            for c in 0..target {
                let mut acc = [0f32; 3];
                for dy in 0..f {
                    for dx in 0..f {
                        let p = self.pixel(c * f + dx, r * f + dy);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                for k in 0..3 {
                    px[(r * target + c) * 3 + k] = (acc[k] / norm).clamp(0.0, 1.0);
                }
            }
        }
        Self::from_pixels(target, px)
    }

    pub fn ensure_size(&self, want: usize) -> Result<()> {
        if self.size != want {
            return Err(Error::Resolution {
                got_w: self.size,
                got_h: self.size,
                want,
            });
        }
        Ok(())
    }
}
