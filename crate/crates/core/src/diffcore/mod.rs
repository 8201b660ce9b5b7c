//! Latent diffusion editing network.

pub mod attention;
pub mod codec;
pub mod conditioning;
pub mod layers;
pub mod model;
pub mod ops;
pub mod schedule;
pub mod unet;

pub use attention::{merge_features, Attention, MergeOrder};
pub use codec::Codec;
pub use conditioning::{AttributeController, AuEmbedding, AuEncoderVariant, ControllerConfig};
pub use model::{CallCounters, ConditionBundle, EditModel, FeatureCache, IdCondition, IdVariant, ModelConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};
