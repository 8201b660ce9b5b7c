//! The full editing network: codec, AU encoder, Attribute Controller, ID
//! encoder (or Conv-ID stand-in) and denoising UNet.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle::{DType, Device, Module, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::attention::MergeOrder;
use super::codec::Codec;
use super::conditioning::{AttributeController, AuEmbedding, AuEncoder, AuEncoderVariant, ControllerConfig};
use super::layers::{conv, deterministic_init, Conv2d};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::unet::{BlockFeatures, UNet, UNetLayout};
use crate::au::{AuDelta, NUM_AUS};
use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::synthface::SceneImage;

pub const MODEL_KIND: &str = "edit-model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdVariant {
    /// A UNet twin of the denoiser whose block features are merged into the
    /// denoiser's self-attention.
    #[default]
    UnetMerge,
    /// A single conv on the identity latent, concatenated to the denoiser
    /// input.
    ConvId,
}

impl IdVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::UnetMerge => "unet_merge",
            Self::ConvId => "conv_id",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub codec_factor: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub transformer_blocks: Vec<usize>,
    pub heads: usize,
    pub norm_groups: usize,
    pub conv_in_kernel: usize,
    pub temb_dim: usize,
    pub au_encoder: AuEncoderVariant,
    pub au_mlp_hidden: usize,
    pub au_mlp_channels: usize,
    pub id_variant: IdVariant,
    pub merge_order: MergeOrder,
    pub controller: ControllerConfig,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            codec_factor: 4,
            base_channels: 64,
            channel_mult: vec![1, 2, 4],
            transformer_blocks: vec![1, 1, 1],
            heads: 4,
            norm_groups: 32,
            conv_in_kernel: 3,
            temb_dim: 256,
            au_encoder: AuEncoderVariant::LinearTime,
            au_mlp_hidden: 64,
            au_mlp_channels: 16,
            id_variant: IdVariant::UnetMerge,
            merge_order: MergeOrder::IdFirst,
            controller: ControllerConfig::default(),
            schedule: ScheduleConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The CPU-sized configuration used for the desk-scale runs.
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            channel_mult: vec![1, 2],
            transformer_blocks: vec![0, 1],
            heads: 4,
            norm_groups: 8,
            conv_in_kernel: 1,
            temb_dim: 128,
            ..Self::default()
        }
    }

    /// A very small configuration for unit tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            codec_factor: 4,
            base_channels: 8,
            channel_mult: vec![1, 2],
            transformer_blocks: vec![1, 1],
            heads: 2,
            norm_groups: 4,
            conv_in_kernel: 3,
            temb_dim: 16,
            au_mlp_hidden: 8,
            au_mlp_channels: 4,
            schedule: ScheduleConfig {
                num_timesteps: 50,
                ..ScheduleConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> UNetLayout {
        UNetLayout {
            base_channels: self.base_channels,
            channel_mult: self.channel_mult.clone(),
            transformer_blocks: self.transformer_blocks.clone(),
            heads: self.heads,
            norm_groups: self.norm_groups,
            conv_in_kernel: self.conv_in_kernel,
        }
    }

    pub fn codec(&self) -> Result<Codec> {
        Ok(Codec::new(self.image_size, self.codec_factor)?)
    }

    /// Codec used for the condition image; twice as fine when the
    /// controller has stride 2.
    pub fn condition_codec(&self) -> Result<Codec> {
        match self.controller.stride {
            1 => self.codec(),
            2 if self.codec_factor % 2 == 0 => Ok(Codec::new(self.image_size, self.codec_factor / 2)?),
            _ => Err(Error::Config(format!(
                "controller stride {} incompatible with codec factor {}",
                self.controller.stride, self.codec_factor
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.channel_mult.is_empty() || self.channel_mult.len() != self.transformer_blocks.len() {
            return cfg_err("channel_mult and transformer_blocks must be non-empty and equally long".into());
        }
        let codec = self.codec()?;
        let grid = codec.grid();
        if grid % (1 << (self.channel_mult.len() - 1)) != 0 {
            return cfg_err(format!("latent grid {grid} not divisible across {} levels", self.channel_mult.len()));
        }
        for m in &self.channel_mult {
            let c = self.base_channels * m;
            if c % self.norm_groups != 0 || c % self.heads != 0 {
                return cfg_err(format!("width {c} must divide by norm_groups and heads"));
            }
        }
        if self.conv_in_kernel % 2 == 0 {
            return cfg_err("conv_in_kernel must be odd".into());
        }
        if self.au_encoder == AuEncoderVariant::ZeroappendTime && self.temb_dim < NUM_AUS {
            return cfg_err("temb_dim too small for zero-append".into());
        }
        self.condition_codec()?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Per-block ID features, one entry per denoiser transformer block.
#[derive(Debug, Clone)]
pub struct FeatureCache(pub Vec<Tensor>);

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Identity conditioning computed once per edit.
#[derive(Debug, Clone)]
pub enum IdCondition {
    Features(FeatureCache),
    /// Output of the Conv-ID layer, concatenated to the denoiser input.
    Conv(Tensor),
}

impl IdCondition {
    pub fn batch(&self) -> candle::Result<usize> {
        match self {
            Self::Features(f) => f.0.first().map(|t| t.dim(0)).unwrap_or(Ok(0)),
            Self::Conv(t) => t.dim(0),
        }
    }

    /// Repeats every tensor `n` times along the batch (for `n` edits of one
    /// identity image).
    pub fn repeat(&self, n: usize) -> candle::Result<Self> {
        let rep = |t: &Tensor| -> candle::Result<Tensor> {
            let mut dims = vec![1; t.rank()];
            dims[0] = n;
            t.repeat(dims)
        };
        Ok(match self {
            Self::Features(f) => Self::Features(FeatureCache(f.0.iter().map(rep).collect::<candle::Result<_>>()?)),
            Self::Conv(t) => Self::Conv(rep(t)?),
        })
    }
}

/// The conditioning inputs of one denoising call. Every field is required;
/// `None` is reported as a missing condition, never silently defaulted.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditionBundle<'a> {
    pub au: Option<&'a AuEmbedding>,
    /// Codec latent of the condition image (before the Attribute
    /// Controller).
    pub cond_latent: Option<&'a Tensor>,
    pub id: Option<&'a IdCondition>,
}

#[derive(Debug, Default)]
pub struct CallCounters {
    pub id_encode: AtomicUsize,
    pub denoise: AtomicUsize,
}

impl CallCounters {
    pub fn id_encode(&self) -> usize {
        self.id_encode.load(Ordering::SeqCst)
    }

    pub fn denoise(&self) -> usize {
        self.denoise.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.id_encode.store(0, Ordering::SeqCst);
        self.denoise.store(0, Ordering::SeqCst);
    }
}

pub struct EditModel {
    pub config: ModelConfig,
    pub vars: VarMap,
    pub dtype: DType,
    pub device: Device,
    pub codec: Codec,
    pub cond_codec: Codec,
    pub schedule: NoiseSchedule,
    pub counters: Arc<CallCounters>,
    denoiser: UNet,
    id_encoder: Option<UNet>,
    conv_id: Option<Conv2d>,
    controller: AttributeController,
    au_encoder: AuEncoder,
}

/// Variable-name prefixes of the four jointly trained parts.
pub mod prefix {
    pub const DENOISER: &str = "denoiser.";
    pub const ID_ENCODER: &str = "id_encoder.";
    pub const CONV_ID: &str = "conv_id.";
    pub const CONTROLLER: &str = "controller.";
    pub const AU_ENCODER: &str = "au_encoder.";
}

impl EditModel {
    pub fn new(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, dtype, device);
        let codec = config.codec()?;
        let cond_codec = config.condition_codec()?;
        let latent = codec.channels();
        let layout = config.layout();

        let au_encoder = AuEncoder::new(
            vb.pp("au_encoder"),
            config.au_encoder,
            config.temb_dim,
            config.au_mlp_hidden,
            config.au_mlp_channels,
        )?;
        let controller = AttributeController::new(vb.pp("controller"), config.controller, cond_codec.channels(), latent)?;
        let (id_encoder, conv_id) = match config.id_variant {
            IdVariant::UnetMerge => (Some(UNet::new(vb.pp("id_encoder"), &layout, latent, None, 0)?), None),
            IdVariant::ConvId => (None, Some(conv(vb.pp("conv_id"), latent, latent, 3, 1, 1)?)),
        };
        let in_channels = 2 * latent + au_encoder.spatial_channels() + if conv_id.is_some() { latent } else { 0 };
        let denoiser = UNet::new(vb.pp("denoiser"), &layout, in_channels, Some(config.temb_dim), latent)?;
        deterministic_init(&vars, config.init_seed, &[prefix::DENOISER, prefix::ID_ENCODER])?;

        Ok(Self {
            schedule: NoiseSchedule::new(&config.schedule),
            config,
            vars,
            dtype,
            device: device.clone(),
            codec,
            cond_codec,
            counters: Arc::new(CallCounters::default()),
            denoiser,
            id_encoder,
            conv_id,
            controller,
            au_encoder,
        })
    }

    pub fn grid(&self) -> usize {
        self.codec.grid()
    }

    pub fn latent_channels(&self) -> usize {
        self.codec.channels()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn controller(&self) -> &AttributeController {
        &self.controller
    }

    pub fn denoiser(&self) -> &UNet {
        &self.denoiser
    }

    pub fn encode_images(&self, images: &[&SceneImage]) -> Result<Tensor> {
        self.codec.encode(images, self.dtype, &self.device)
    }

    pub fn encode_conditions(&self, images: &[&SceneImage]) -> Result<Tensor> {
        self.cond_codec.encode(images, self.dtype, &self.device)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Vec<SceneImage>> {
        self.codec.decode(z)
    }

    /// `(B, 12)` tensor of AU deltas in the model dtype.
    pub fn delta_tensor(&self, deltas: &[AuDelta]) -> Result<Tensor> {
        let data: Vec<f64> = deltas.iter().flat_map(|d| d.values().iter().copied()).collect();
        Ok(Tensor::from_vec(data, (deltas.len(), NUM_AUS), &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn au_encode(&self, delta: &Tensor) -> Result<AuEmbedding> {
        Ok(self.au_encoder.forward(delta)?)
    }

    pub fn attribute_control(&self, cond_latent: &Tensor) -> Result<Tensor> {
        self.controller
            .forward(cond_latent, self.grid())
            .map_err(|e| Error::Config(format!("attribute controller: {e}")))
    }

    /// Runs the identity branch once on the identity latent `s`.
    pub fn id_encode(&self, s: &Tensor) -> Result<IdCondition> {
        self.counters.id_encode.fetch_add(1, Ordering::SeqCst);
        match (&self.id_encoder, &self.conv_id) {
            (Some(enc), _) => {
                let (_, feats) = enc.forward(s, None, BlockFeatures::Capture)?;
                Ok(IdCondition::Features(FeatureCache(feats)))
            }
            (None, Some(c)) => Ok(IdCondition::Conv(c.forward(s)?)),
            (None, None) => unreachable!("one identity branch is always built"),
        }
    }

    /// Predicted noise for `z_t` at per-item `timesteps`.
    pub fn denoise_step(&self, z_t: &Tensor, timesteps: &[usize], cond: ConditionBundle) -> Result<Tensor> {
        let au = cond.au.ok_or(Error::MissingCondition("AU embedding"))?;
        let cond_latent = cond.cond_latent.ok_or(Error::MissingCondition("condition latent"))?;
        let id = cond.id.ok_or(Error::MissingCondition("identity features"))?;
        let b = z_t.dim(0)?;
        if timesteps.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch {b}", timesteps.len())));
        }
        for &t in timesteps {
            self.schedule.check_timestep(t)?;
        }
        for (what, n) in [("AU embedding", au.batch()?), ("condition latent", cond_latent.dim(0)?), ("identity", id.batch()?)] {
            if n != b {
                return Err(Error::Shape(format!("{what} batch {n} != latent batch {b}")));
            }
        }
        self.counters.denoise.fetch_add(1, Ordering::SeqCst);

        let g = self.grid();
        let mut inputs = vec![z_t.clone(), self.attribute_control(cond_latent)?];
        if let IdCondition::Conv(c) = id {
            inputs.push(c.clone());
        }
        let temb = self.denoiser.time_embedding(timesteps, z_t)?.expect("denoiser has a time embedding");
        let emb = match au {
            AuEmbedding::Time(e) => (temb + e)?,
            AuEmbedding::Spatial(e) => {
                let k = e.dim(1)?;
                inputs.push(e.reshape((b, k, 1, 1))?.broadcast_as((b, k, g, g))?.contiguous()?);
                temb
            }
        };
        let x = Tensor::cat(&inputs, 1)?;
        let features = match id {
            IdCondition::Features(cache) => BlockFeatures::Merge(&cache.0, self.config.merge_order),
            IdCondition::Conv(_) => BlockFeatures::None,
        };
        let (out, _) = self.denoiser.forward(&x, Some(&emb), features)?;
        Ok(out.expect("denoiser has an output head"))
    }

    pub fn config_hash(&self) -> Result<String> {
        self.config.hash()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(MODEL_KIND, &self.config)?;
        c.insert_varmap("", &self.vars)?;
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        ckpt.expect_kind(MODEL_KIND)?;
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        let model = Self::new(config, dtype, device)?;
        if model.config_hash()? != ckpt.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        ckpt.load_varmap("", &model.vars)?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path, device: &Device) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        let model = Self::from_checkpoint(&ckpt, DType::F32, device)?;
        Ok((model, ckpt))
    }
}
