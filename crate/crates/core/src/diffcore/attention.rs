//! Transformer blocks and identity feature merging.
//!
//! Inside every denoiser transformer block the normalised features entering
//! self-attention (`b_n`) are concatenated along width with the matching
//! ID-encoder features (`a_n`), self-attention runs over all `2 * h * w`
//! positions, and the half at the denoiser stream's positions is cropped
//! back out before cross-attention.

use candle::{Module, Result, Tensor};
use candle_nn::{self as nn, VarBuilder};
use serde::{Deserialize, Serialize};

use super::layers::{from_tokens, group_norm, layer_norm, linear, linear_no_bias, to_tokens, FeedForward, GroupNorm, LayerNorm, Linear};

/// Multi-head scaled dot-product attention over token sequences
/// `(B, N, C)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(vb: VarBuilder, query_dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if query_dim % heads != 0 {
            candle::bail!("attention width {query_dim} not divisible by {heads} heads");
        }
        Ok(Self {
            to_q: linear_no_bias(query_dim, query_dim, vb.pp("to_q"))?,
            to_k: linear_no_bias(context_dim, query_dim, vb.pp("to_k"))?,
            to_v: linear_no_bias(context_dim, query_dim, vb.pp("to_v"))?,
            to_out: linear(query_dim, query_dim, vb.pp("to_out"))?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward_with_context(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?)? * scale)?;
        // softmax_last_dim has no backward pass; the generic form does
        let probs = nn::ops::softmax(&scores, candle::D::Minus1)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.to_out.forward(&out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_context(x, x)
    }
}

/// Which side of the width-concatenated map the ID features occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOrder {
    /// `a_n ⊕ b_n`; the denoiser half is the second half.
    #[default]
    IdFirst,
    /// `b_n ⊕ a_n`; the denoiser half is the first half.
    DenoiserFirst,
}

/// Self-attention of the denoiser features `b` jointly with the ID features
/// `a`. Both are `(B, H, W, C)`; the result has the shape of `b`.
pub fn merge_features(attn: &Attention, a: &Tensor, b: &Tensor, order: MergeOrder) -> Result<Tensor> {
    if a.dims() != b.dims() {
        candle::bail!("merge_features: ID features {:?} vs denoiser features {:?}", a.dims(), b.dims());
    }
    let (bsz, h, w, c) = b.dims4()?;
    let merged = match order {
        MergeOrder::IdFirst => Tensor::cat(&[a, b], 2)?,
        MergeOrder::DenoiserFirst => Tensor::cat(&[b, a], 2)?,
    };
    let tokens = merged.reshape((bsz, h * 2 * w, c))?;
    let out = attn.forward(&tokens)?.reshape((bsz, h, 2 * w, c))?;
    let start = match order {
        MergeOrder::IdFirst => w,
        MergeOrder::DenoiserFirst => 0,
    };
    out.narrow(2, start, w)?.contiguous()
}

/// Plain self-attention over `(B, H, W, C)` features.
pub fn self_attend(attn: &Attention, b: &Tensor) -> Result<Tensor> {
    let (bsz, h, w, c) = b.dims4()?;
    attn.forward(&b.reshape((bsz, h * w, c))?)?.reshape((bsz, h, w, c))
}

/// Spatial transformer: group norm, input projection, self-attention,
/// cross-attention to one learned context token, feed-forward, output
/// projection, all with residuals.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm: GroupNorm,
    proj_in: Linear,
    norm1: LayerNorm,
    pub attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    context: Tensor,
    norm3: LayerNorm,
    ff: FeedForward,
    proj_out: Linear,
}

/// What the self-attention of a block sees besides its own features.
pub enum SelfAttnInput<'a> {
    Plain,
    Merge(&'a Tensor, MergeOrder),
}

impl TransformerBlock {
    pub fn new(vb: VarBuilder, channels: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: group_norm(groups, channels, 1e-6, vb.pp("norm"))?,
            proj_in: linear(channels, channels, vb.pp("proj_in"))?,
            norm1: layer_norm(channels, 1e-5, vb.pp("norm1"))?,
            attn1: Attention::new(vb.pp("attn1"), channels, channels, heads)?,
            norm2: layer_norm(channels, 1e-5, vb.pp("norm2"))?,
            attn2: Attention::new(vb.pp("attn2"), channels, channels, heads)?,
            context: vb.get((1, 1, channels), "context")?,
            norm3: layer_norm(channels, 1e-5, vb.pp("norm3"))?,
            ff: FeedForward::new(vb.pp("ff"), channels, 4)?,
            proj_out: linear(channels, channels, vb.pp("proj_out"))?,
        })
    }

    /// Runs the block on `(B, C, H, W)` input. Returns the output and the
    /// normalised features that entered self-attention, `(B, H, W, C)`.
    pub fn forward(&self, x: &Tensor, input: SelfAttnInput) -> Result<(Tensor, Tensor)> {
        let (bsz, c, h, w) = x.dims4()?;
        let hidden = self.proj_in.forward(&to_tokens(&self.norm.forward(x)?)?)?;
        let normed = self.norm1.forward(&hidden)?;
        let attended = match input {
            SelfAttnInput::Plain => self_attend(&self.attn1, &normed)?,
            SelfAttnInput::Merge(a, order) => merge_features(&self.attn1, a, &normed, order)?,
        };
        let hidden = (hidden + attended)?;
        let tokens = hidden.reshape((bsz, h * w, c))?;
        let ctx = self.context.broadcast_as((bsz, 1, c))?.contiguous()?;
        let tokens = (&tokens + self.attn2.forward_with_context(&self.norm2.forward(&tokens)?, &ctx)?)?;
        let tokens = (&tokens + self.ff.forward(&self.norm3.forward(&tokens)?)?)?;
        let out = self.proj_out.forward(&tokens)?.reshape((bsz, h, w, c))?;
        Ok(((x + from_tokens(&out)?)?, normed))
    }
}
