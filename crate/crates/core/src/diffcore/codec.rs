//! Latent codec between 64x64 RGB images and the diffusion grid.
//!
//! The codec is a fixed space-to-depth rearrangement by `factor` followed by
//! the affine map `2x - 1`, so `decode(encode(x)) == x` up to f32 rounding
//! and exactly after 8-bit quantisation. A 64x64 image becomes a
//! `16 x 16 x 48` latent with `factor = 4`.

use candle::{DType, Device, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::synthface::SceneImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codec {
    pub image_size: usize,
    pub factor: usize,
}

impl Codec {
    pub fn new(image_size: usize, factor: usize) -> Result<Self> {
        if factor == 0 || image_size % factor != 0 {
            candle::bail!("codec factor {factor} does not divide image size {image_size}");
        }
        Ok(Self { image_size, factor })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.factor
    }

    pub fn channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    /// `(B, 3, S, S)` in `[0,1]` to `(B, 3 f^2, S/f, S/f)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            let s = self.image_size;
            candle::bail!("codec expects (B, 3, {s}, {s}), got {:?}", x.dims());
        }
        let f = self.factor;
        let g = self.grid();
        // (b, c, g, f, g, f) -> (b, c, f, f, g, g)
        let z = x
            .reshape((b, c, g, f, g, f))?
            .permute((0, 1, 3, 5, 2, 4))?
            .reshape((b, c * f * f, g, g))?;
        z.affine(2.0, -1.0)
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        let g = self.grid();
        if c != self.channels() || h != g || w != g {
            candle::bail!("codec expects latent (B, {}, {g}, {g}), got {:?}", self.channels(), z.dims());
        }
        let f = self.factor;
        let x = z
            .affine(0.5, 0.5)?
            .reshape((b, 3, f, f, g, g))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, 3, self.image_size, self.image_size))?;
        Ok(x)
    }

    /// Encodes a batch of images into one latent tensor.
    pub fn encode(&self, images: &[&SceneImage], dtype: DType, device: &Device) -> crate::Result<Tensor> {
        let x = images_to_tensor(images, self.image_size, device)?;
        Ok(self.encode_tensor(&x)?.to_dtype(dtype)?)
    }

    /// Decodes a latent batch. Pixels are clamped to `[0,1]`; generated
    /// images carry no provenance.
    pub fn decode(&self, z: &Tensor) -> crate::Result<Vec<SceneImage>> {
        let x = self.decode_tensor(&z.to_dtype(DType::F32)?)?.clamp(0f32, 1f32)?;
        tensor_to_images(&x)
    }
}

/// `(B, 3, S, S)` f32 tensor from HWC images.
pub fn images_to_tensor(images: &[&SceneImage], size: usize, device: &Device) -> crate::Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.size != size {
            return Err(crate::Error::Resolution {
                got_w: img.size,
                got_h: img.size,
                want: size,
            });
        }
        for c in 0..3 {
            for i in 0..size * size {
                data.push(img.pixels[i * 3 + c]);
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), device)?)
}

pub fn tensor_to_images(x: &Tensor) -> crate::Result<Vec<SceneImage>> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 || h != w {
        return Err(crate::Error::Shape(format!("expected (B, 3, S, S) images, got {:?}", x.dims())));
    }
    let hwc = x.to_dtype(DType::F32)?.permute((0, 2, 3, 1))?.contiguous()?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let px = hwc.get(i)?.flatten_all()?.to_vec1::<f32>()?;
        out.push(SceneImage::from_pixels(h, px)?);
    }
    Ok(out)
}
