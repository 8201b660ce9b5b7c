//! Small building blocks and deterministic parameter initialisation.

use candle::{DType, Module, Result, Tensor, D};
use candle_nn::{self as nn, VarBuilder, VarMap};
use rand::Rng;

use super::ops::{expand_rows, im2col_op};
use crate::checkpoint::sha256_hex;
use crate::rng;

/// 2-D convolution computed as im2col followed by one matmul, with a
/// hand-written col2im backward. Parameter names and shapes match
/// `candle_nn::Conv2d`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let cout = self.weight.dim(0)?;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let cols = im2col_op(x, k, s, p)?;
        let out = self
            .weight
            .reshape((cout, c * k * k))?
            .matmul(&cols)?
            .broadcast_add(&self.bias.reshape((cout, 1))?)?;
        out.reshape((cout, b, ho, wo))?.transpose(0, 1)
    }
}

/// Affine layer applied over the last dimension of any-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

pub fn linear(din: usize, dout: usize, vb: VarBuilder) -> Result<Linear> {
    let bound = 1.0 / (din as f64).sqrt();
    let init = nn::Init::Uniform { lo: -bound, up: bound };
    Ok(Linear {
        weight: vb.get_with_hints((dout, din), "weight", init)?,
        bias: Some(vb.get_with_hints(dout, "bias", init)?),
    })
}

pub fn linear_no_bias(din: usize, dout: usize, vb: VarBuilder) -> Result<Linear> {
    let bound = 1.0 / (din as f64).sqrt();
    Ok(Linear {
        weight: vb.get_with_hints((dout, din), "weight", nn::Init::Uniform { lo: -bound, up: bound })?,
        bias: None,
    })
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let din = dims.pop().unwrap_or(1);
        let rows: usize = dims.iter().product();
        let mut y = x.reshape((rows, din))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = (y + expand_rows(b, rows)?)?;
        }
        dims.push(self.weight.dim(0)?);
        y.reshape(dims)
    }
}

/// Group normalisation over `(B, C, H, W)` input.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

pub fn group_norm(groups: usize, channels: usize, eps: f64, vb: VarBuilder) -> Result<GroupNorm> {
    if channels % groups != 0 {
        candle::bail!("group norm: {channels} channels not divisible by {groups} groups");
    }
    Ok(GroupNorm {
        weight: vb.get_with_hints(channels, "weight", nn::Init::Const(1.0))?,
        bias: vb.get_with_hints(channels, "bias", nn::Init::Const(0.0))?,
        groups,
        eps,
    })
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let xg = x.reshape((b, self.groups, (c / self.groups) * hw))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c * hw))?;
        let per_pixel = |v: &Tensor| -> Result<Tensor> {
            expand_rows(&v.reshape((c, 1))?.broadcast_as((c, hw))?.contiguous()?, b)
        };
        let y = ((normed * per_pixel(&self.weight)?)? + per_pixel(&self.bias)?)?;
        y.reshape((b, c, h, w))
    }
}

pub fn conv(vb: VarBuilder, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Result<Conv2d> {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    let init = nn::Init::Uniform { lo: -bound, up: bound };
    Ok(Conv2d {
        weight: vb.get_with_hints((cout, cin, k, k), "weight", init)?,
        bias: vb.get_with_hints(cout, "bias", init)?,
        kernel: k,
        stride,
        padding,
    })
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.silu()
}

/// `(B, C, H, W)` to `(B, H, W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    x.permute((0, 2, 3, 1))?.contiguous()
}

/// `(B, H, W, C)` to `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor) -> Result<Tensor> {
    x.permute((0, 3, 1, 2))?.contiguous()
}

/// Sinusoidal timestep features of width `dim`.
pub fn timestep_features(timesteps: &[usize], dim: usize, dtype: DType, device: &candle::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        let mut sin = Vec::with_capacity(half);
        let mut cos = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            sin.push((t * freq).sin());
            cos.push((t * freq).cos());
        }
        data.extend(cos);
        data.extend(sin);
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)
}

/// Layer norm over the last dimension from plain tensor ops, so it works
/// (and differentiates) in any float dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

pub fn layer_norm(dim: usize, eps: f64, vb: VarBuilder) -> Result<LayerNorm> {
    Ok(LayerNorm {
        weight: vb.get_with_hints(dim, "weight", nn::Init::Const(1.0))?,
        bias: vb.get_with_hints(dim, "bias", nn::Init::Const(0.0))?,
        eps,
    })
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d = *dims.last().unwrap_or(&1);
        let rows = x.elem_count() / d.max(1);
        let x = x.reshape((rows, d))?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = ((normed * expand_rows(&self.weight, rows)?)? + expand_rows(&self.bias, rows)?)?;
        y.reshape(dims)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(vb: VarBuilder, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(dim, dim * mult, vb.pp("fc1"))?,
            fc2: linear(dim * mult, dim, vb.pp("fc2"))?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    (a - b)?.sqr()?.mean_all()
}

/// Per-sample mean squared error, shape `(B,)`.
pub fn mse_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    (a - b)?.sqr()?.flatten_from(1)?.mean(D::Minus1)
}

fn name_seed(base: u64, name: &str) -> u64 {
    let h = sha256_hex(name.as_bytes());
    let v = u64::from_str_radix(&h[..16], 16).expect("hex digest");
    rng::derive_seed(base, v)
}

/// Re-initialises every variable from a seed, independent of candle's
/// thread-local RNG. The value of each variable depends only on `seed`, its
/// name with `strip_prefix` removed, and its shape, so two sub-networks with
/// identical layouts receive identical weights.
///
/// * names containing `norm` ending in `weight` → ones, `bias` → zeros
/// * other `bias` → zeros
/// * names ending in `context` → standard normal
/// * everything else → `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
pub fn deterministic_init(vars: &VarMap, seed: u64, strip_prefixes: &[&str]) -> Result<()> {
    let data = vars.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let key = strip_prefixes
            .iter()
            .find_map(|p| name.strip_prefix(p))
            .unwrap_or(name);
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let is_norm = key.split('.').any(|s| s.contains("norm"));
        let values: Vec<f32> = if is_norm && key.ends_with("weight") {
            vec![1.0; n]
        } else if key.ends_with("bias") {
            vec![0.0; n]
        } else if key.ends_with("context") {
            let mut r = rng::seeded(name_seed(seed, key));
            rng::normal_vec(&mut r, n)
        } else {
            let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
            let bound = (1.0 / fan_in as f64).sqrt() as f32;
            let mut r = rng::seeded(name_seed(seed, key));
            (0..n).map(|_| r.random_range(-bound..=bound)).collect()
        };
        let t = Tensor::from_vec(values, dims.as_slice(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::Device;

    #[test]
    fn conv_matches_candle_conv2d() {
        let dev = Device::Cpu;
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, DType::F64, &dev);
        let x = Tensor::randn(0f64, 1., (2, 3, 9, 9), &dev).unwrap();
        for (i, &(k, s, p)) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1), (4, 1, 0)].iter().enumerate() {
            let ours = conv(vb.pp(format!("c{i}")), 3, 5, k, s, p).unwrap();
            let reference = x
                .conv2d(ours.weight(), p, s, 1, 1)
                .unwrap()
                .broadcast_add(&ours.bias.reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            let got = ours.forward(&x).unwrap();
            assert_eq!(got.dims(), reference.dims(), "k{k} s{s} p{p}");
            let err = (got - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(err < 1e-12, "k{k} s{s} p{p}: {err}");
        }
    }
}
