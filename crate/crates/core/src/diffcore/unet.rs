//! UNet shared by the denoiser and the ID encoder.
//!
//! Both networks are built from the same [`UNetLayout`]; the ID encoder
//! differs only in its input channel count, the absence of time
//! conditioning, and the absence of an output head. Block names are
//! identical between the two so that seeded initialisation gives them the
//! same starting weights.

use candle::{Module, Result, Tensor};
use candle_nn::VarBuilder;

use super::attention::{MergeOrder, SelfAttnInput, TransformerBlock};
use super::layers::{conv, group_norm, linear, silu, timestep_features, Conv2d, GroupNorm, Linear};

/// Architecture shared by denoiser and ID encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetLayout {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub transformer_blocks: Vec<usize>,
    pub heads: usize,
    pub norm_groups: usize,
    pub conv_in_kernel: usize,
}

impl UNetLayout {
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn num_levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Number of transformer blocks in one full pass (down, mid, up).
    pub fn num_transformer_blocks(&self) -> usize {
        2 * self.transformer_blocks.iter().sum::<usize>() + 1
    }

    /// `(h, w, c)` of every transformer block in execution order, for an
    /// input grid of `grid x grid`.
    pub fn block_shapes(&self, grid: usize) -> Vec<(usize, usize, usize)> {
        let n = self.num_levels();
        let res = |l: usize| grid >> l;
        let mut out = Vec::new();
        for l in 0..n {
            for _ in 0..self.transformer_blocks[l] {
                out.push((res(l), res(l), self.level_channels(l)));
            }
        }
        out.push((res(n - 1), res(n - 1), self.level_channels(n - 1)));
        for l in (0..n).rev() {
            for _ in 0..self.transformer_blocks[l] {
                out.push((res(l), res(l), self.level_channels(l)));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vb: VarBuilder, cin: usize, cout: usize, temb_dim: Option<usize>, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(groups, cin, 1e-6, vb.pp("norm1"))?,
            conv1: conv(vb.pp("conv1"), cin, cout, 3, 1, 1)?,
            temb_proj: temb_dim.map(|d| linear(d, cout, vb.pp("temb_proj"))).transpose()?,
            norm2: group_norm(groups, cout, 1e-6, vb.pp("norm2"))?,
            conv2: conv(vb.pp("conv2"), cout, cout, 3, 1, 1)?,
            skip: (cin != cout).then(|| conv(vb.pp("skip"), cin, cout, 1, 1, 0)).transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(temb)) = (&self.temb_proj, temb) {
            let t = proj.forward(&silu(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&t)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    transformers: Vec<TransformerBlock>,
    resample: Option<Conv2d>,
}

/// Features captured (ID encoder) or consumed (denoiser) at each
/// transformer block.
pub enum BlockFeatures<'a> {
    /// Plain self-attention everywhere; record the features.
    Capture,
    /// Merge the given per-block ID features into self-attention.
    Merge(&'a [Tensor], MergeOrder),
    /// Plain self-attention, nothing recorded.
    None,
}

struct BlockRunner<'a> {
    features: BlockFeatures<'a>,
    captured: Vec<Tensor>,
    block: usize,
}

impl BlockRunner<'_> {
    fn run(&mut self, t: &TransformerBlock, h: &Tensor) -> Result<Tensor> {
        let input = match &self.features {
            BlockFeatures::Merge(cache, order) => SelfAttnInput::Merge(&cache[self.block], *order),
            _ => SelfAttnInput::Plain,
        };
        let (out, normed) = t.forward(h, input)?;
        if matches!(self.features, BlockFeatures::Capture) {
            self.captured.push(normed);
        }
        self.block += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    layout: UNetLayout,
    conv_in: Conv2d,
    time_embed: Option<(Linear, Linear)>,
    down: Vec<Level>,
    mid_res: ResBlock,
    mid_transformer: TransformerBlock,
    up: Vec<Level>,
    out: Option<(GroupNorm, Conv2d)>,
}

impl UNet {
    /// `temb_dim: Some(d)` builds a time-conditioned denoiser with an output
    /// head producing `out_channels`; `None` builds an ID encoder.
    pub fn new(
        vb: VarBuilder,
        layout: &UNetLayout,
        in_channels: usize,
        temb_dim: Option<usize>,
        out_channels: usize,
    ) -> Result<Self> {
        let l = layout;
        let g = l.norm_groups;
        let n = l.num_levels();
        let base = l.base_channels;
        let ck = l.conv_in_kernel;
        let conv_in = conv(vb.pp("conv_in"), in_channels, base, ck, 1, ck / 2)?;
        let time_embed = match temb_dim {
            Some(d) => Some((
                linear(base, d, vb.pp("time_embed.fc1"))?,
                linear(d, d, vb.pp("time_embed.fc2"))?,
            )),
            None => None,
        };

        let mut down = Vec::with_capacity(n);
        let mut ch = base;
        for lvl in 0..n {
            let vb_l = vb.pp(format!("down.{lvl}"));
            let cout = l.level_channels(lvl);
            let res = ResBlock::new(vb_l.pp("res"), ch, cout, temb_dim, g)?;
            let transformers = (0..l.transformer_blocks[lvl])
                .map(|i| TransformerBlock::new(vb_l.pp(format!("attn.{i}")), cout, l.heads, g))
                .collect::<Result<Vec<_>>>()?;
            let resample = (lvl + 1 < n)
                .then(|| conv(vb_l.pp("downsample"), cout, cout, 3, 2, 1))
                .transpose()?;
            down.push(Level {
                res,
                transformers,
                resample,
            });
            ch = cout;
        }

        let mid_res = ResBlock::new(vb.pp("mid.res"), ch, ch, temb_dim, g)?;
        let mid_transformer = TransformerBlock::new(vb.pp("mid.attn"), ch, l.heads, g)?;

        let mut up = Vec::with_capacity(n);
        for lvl in (0..n).rev() {
            let vb_l = vb.pp(format!("up.{lvl}"));
            let cout = l.level_channels(lvl);
            let res = ResBlock::new(vb_l.pp("res"), ch + cout, cout, temb_dim, g)?;
            let transformers = (0..l.transformer_blocks[lvl])
                .map(|i| TransformerBlock::new(vb_l.pp(format!("attn.{i}")), cout, l.heads, g))
                .collect::<Result<Vec<_>>>()?;
            let resample = (lvl > 0)
                .then(|| conv(vb_l.pp("upsample"), cout, cout, 3, 1, 1))
                .transpose()?;
            up.push(Level {
                res,
                transformers,
                resample,
            });
            ch = cout;
        }

        let out = match temb_dim {
            Some(_) => Some((
                group_norm(g, base, 1e-6, vb.pp("out.norm"))?,
                conv(vb.pp("out.conv"), base, out_channels, ck, 1, ck / 2)?,
            )),
            None => None,
        };

        Ok(Self {
            layout: layout.clone(),
            conv_in,
            time_embed,
            down,
            mid_res,
            mid_transformer,
            up,
            out,
        })
    }

    pub fn layout(&self) -> &UNetLayout {
        &self.layout
    }

    /// Time embedding of a batch of timesteps (denoiser only).
    pub fn time_embedding(&self, timesteps: &[usize], x: &Tensor) -> Result<Option<Tensor>> {
        match &self.time_embed {
            None => Ok(None),
            Some((fc1, fc2)) => {
                let f = timestep_features(timesteps, self.layout.base_channels, x.dtype(), x.device())?;
                Ok(Some(fc2.forward(&silu(&fc1.forward(&f)?)?)?))
            }
        }
    }

    /// Runs the network. `emb` is the (time + AU) embedding for the
    /// denoiser and `None` for the ID encoder. Returns the output head's
    /// prediction (if any) and the captured block features (if capturing).
    pub fn forward(
        &self,
        x: &Tensor,
        emb: Option<&Tensor>,
        features: BlockFeatures,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        let total = self.layout.num_transformer_blocks();
        if let BlockFeatures::Merge(cache, _) = &features {
            if cache.len() != total {
                candle::bail!("feature cache has {} entries, UNet has {total} transformer blocks", cache.len());
            }
        }
        let mut runner = BlockRunner {
            features,
            captured: Vec::new(),
            block: 0,
        };
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.res.forward(&h, emb)?;
            for t in &level.transformers {
                h = runner.run(t, &h)?;
            }
            skips.push(h.clone());
            if let Some(ds) = &level.resample {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid_res.forward(&h, emb)?;
        h = runner.run(&self.mid_transformer, &h)?;

        for level in &self.up {
            // the encoder has no output head: stop once every block has run
            if self.out.is_none() && runner.block == total {
                break;
            }
            let skip = skips.pop().expect("one skip per level");
            h = level.res.forward(&Tensor::cat(&[&h, &skip], 1)?, emb)?;
            for t in &level.transformers {
                h = runner.run(t, &h)?;
            }
            if let Some(us) = &level.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = us.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }

        let out = match &self.out {
            Some((norm, conv_out)) => Some(conv_out.forward(&silu(&norm.forward(&h)?)?)?),
            None => None,
        };
        Ok((out, runner.captured))
    }
}
