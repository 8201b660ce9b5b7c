//! AU encoders and the Attribute Controller.

use candle::{Module, Result, Tensor};
use candle_nn::{self as nn, VarBuilder};
use serde::{Deserialize, Serialize};

use super::layers::{conv, silu, Conv2d};
use crate::au::NUM_AUS;

/// How the AU delta enters the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuEncoderVariant {
    /// One linear layer to the time-embedding width, added to the time
    /// embedding.
    #[default]
    LinearTime,
    /// An MLP whose output is broadcast over the grid and concatenated to
    /// the denoiser's first convolution input.
    MlpConv,
    /// The raw delta padded with zeros to the time-embedding width, added to
    /// the time embedding. No parameters.
    ZeroappendTime,
}

impl AuEncoderVariant {
    pub const ALL: [AuEncoderVariant; 3] = [Self::LinearTime, Self::MlpConv, Self::ZeroappendTime];

    pub fn name(&self) -> &'static str {
        match self {
            Self::LinearTime => "linear_time",
            Self::MlpConv => "mlp_conv",
            Self::ZeroappendTime => "zeroappend_time",
        }
    }
}

/// Encoded AU condition.
#[derive(Debug, Clone)]
pub enum AuEmbedding {
    /// `(B, temb_dim)`, summed with the time embedding.
    Time(Tensor),
    /// `(B, k)`, broadcast to `(B, k, h, w)` and concatenated to the input.
    Spatial(Tensor),
}

impl AuEmbedding {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Self::Time(t) | Self::Spatial(t) => t,
        }
    }

    pub fn batch(&self) -> Result<usize> {
        self.tensor().dim(0)
    }
}

#[derive(Debug, Clone)]
pub enum AuEncoder {
    Linear(nn::Linear),
    Mlp(nn::Linear, nn::Linear),
    ZeroAppend { width: usize },
}

impl AuEncoder {
    pub fn new(vb: VarBuilder, variant: AuEncoderVariant, temb_dim: usize, mlp_hidden: usize, mlp_out: usize) -> Result<Self> {
        Ok(match variant {
            AuEncoderVariant::LinearTime => Self::Linear(nn::linear(NUM_AUS, temb_dim, vb.pp("linear"))?),
            AuEncoderVariant::MlpConv => Self::Mlp(
                nn::linear(NUM_AUS, mlp_hidden, vb.pp("fc1"))?,
                nn::linear(mlp_hidden, mlp_out, vb.pp("fc2"))?,
            ),
            AuEncoderVariant::ZeroappendTime => {
                if temb_dim < NUM_AUS {
                    candle::bail!("zero-append AU encoder needs a time embedding of at least {NUM_AUS}");
                }
                Self::ZeroAppend { width: temb_dim }
            }
        })
    }

    /// Input channels this encoder adds to the denoiser's first conv.
    pub fn spatial_channels(&self) -> usize {
        match self {
            Self::Mlp(_, fc2) => fc2.weight().dim(0).unwrap_or(0),
            _ => 0,
        }
    }

    /// `delta` is `(B, 12)`.
    pub fn forward(&self, delta: &Tensor) -> Result<AuEmbedding> {
        let (_, n) = delta.dims2()?;
        if n != NUM_AUS {
            candle::bail!("AU delta must have {NUM_AUS} components, got {n}");
        }
        Ok(match self {
            Self::Linear(l) => AuEmbedding::Time(l.forward(delta)?),
            Self::Mlp(fc1, fc2) => AuEmbedding::Spatial(fc2.forward(&silu(&fc1.forward(delta)?)?)?),
            Self::ZeroAppend { width } => AuEmbedding::Time(delta.pad_with_zeros(1, 0, width - NUM_AUS)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub kernel: usize,
    /// 1: the condition latent is on the noise grid and the conv uses
    /// "same" padding. 2: the condition latent is on a grid twice as fine
    /// and the conv halves it.
    pub stride: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { kernel: 4, stride: 1 }
    }
}

/// Single convolution aligning the condition-image latent with the noisy
/// latent grid.
#[derive(Debug, Clone)]
pub struct AttributeController {
    conv: Conv2d,
    cfg: ControllerConfig,
    pad: (usize, usize),
}

impl AttributeController {
    pub fn new(vb: VarBuilder, cfg: ControllerConfig, cin: usize, cout: usize) -> Result<Self> {
        let (conv_pad, pad) = match cfg.stride {
            1 => {
                let total = cfg.kernel - 1;
                (0, (total / 2, total - total / 2))
            }
            2 => {
                if cfg.kernel % 2 != 0 {
                    candle::bail!("stride-2 controller needs an even kernel, got {}", cfg.kernel);
                }
                ((cfg.kernel - 2) / 2, (0, 0))
            }
            s => candle::bail!("controller stride must be 1 or 2, got {s}"),
        };
        Ok(Self {
            conv: conv(vb.pp("conv"), cin, cout, cfg.kernel, cfg.stride, conv_pad)?,
            cfg,
            pad,
        })
    }

    /// `(B, cin, g*stride, g*stride)` to `(B, cout, g, g)`. `grid` is the
    /// noisy-latent grid; a mismatch is an error.
    pub fn forward(&self, cond: &Tensor, grid: usize) -> Result<Tensor> {
        let (_, _, h, w) = cond.dims4()?;
        if h != grid * self.cfg.stride || w != grid * self.cfg.stride {
            candle::bail!(
                "condition latent is {h}x{w}; stride {} controller needs {}x{}",
                self.cfg.stride,
                grid * self.cfg.stride,
                grid * self.cfg.stride
            );
        }
        let x = if self.pad != (0, 0) {
            cond.pad_with_zeros(2, self.pad.0, self.pad.1)?
                .pad_with_zeros(3, self.pad.0, self.pad.1)?
        } else {
            cond.clone()
        };
        self.conv.forward(&x)
    }

    pub fn weight(&self) -> &Tensor {
        self.conv.weight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::{DType, Device};
    use candle_nn::VarMap;

    fn vb(vars: &VarMap) -> VarBuilder<'_> {
        VarBuilder::from_varmap(vars, DType::F32, &Device::Cpu)
    }

    #[test]
    fn controller_same_padding_keeps_grid() {
        let vars = VarMap::new();
        let ac = AttributeController::new(vb(&vars), ControllerConfig::default(), 4, 4).unwrap();
        let x = Tensor::ones((2, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ac.forward(&x, 16).unwrap().dims(), &[2, 4, 16, 16]);
        assert!(ac.forward(&x, 8).is_err());
    }

    #[test]
    fn controller_stride_two_halves_grid() {
        let vars = VarMap::new();
        let cfg = ControllerConfig { kernel: 4, stride: 2 };
        let ac = AttributeController::new(vb(&vars), cfg, 4, 4).unwrap();
        let x = Tensor::ones((1, 4, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ac.forward(&x, 16).unwrap().dims(), &[1, 4, 16, 16]);
        assert!(ac.forward(&x, 32).is_err());
    }

    #[test]
    fn zero_append_pads() {
        let enc = AuEncoder::new(vb(&VarMap::new()), AuEncoderVariant::ZeroappendTime, 16, 0, 0).unwrap();
        let d = Tensor::arange(1f32, 13., &Device::Cpu).unwrap().reshape((1, 12)).unwrap();
        let e = enc.forward(&d).unwrap();
        let v = e.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(&v[..12], &(1..13).map(|i| i as f32).collect::<Vec<_>>()[..]);
        assert_eq!(&v[12..], &[0.0; 4]);
    }

    #[test]
    fn linear_encoder_is_affine() {
        let vars = VarMap::new();
        let enc = AuEncoder::new(VarBuilder::from_varmap(&vars, DType::F64, &Device::Cpu), AuEncoderVariant::LinearTime, 256, 0, 0).unwrap();
        let dev = Device::Cpu;
        let a = Tensor::new(&[[1f64, 0., -2., 0., 0., 3., 0., 0., 0., 0., 0., 0.5]], &dev).unwrap();
        let b = Tensor::new(&[[0f64, 4., 1., 0., -1., 0., 0., 2., 0., 0., 0., 0.]], &dev).unwrap();
        let z = Tensor::zeros((1, 12), DType::F64, &dev).unwrap();
        let f = |x: &Tensor| enc.forward(x).unwrap().tensor().clone();
        let bias = f(&z);
        assert_eq!(bias.dims(), &[1, 256]);
        let lhs = ((f(&a) + f(&b)).unwrap() - &bias).unwrap();
        let rhs = f(&(&a + &b).unwrap());
        let err = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-12);
    }
}
