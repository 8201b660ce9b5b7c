use crate::au::AuDelta;
use crate::error::Result;
use crate::rng;

use super::condition::build_condition_image;
use super::image::SceneImage;
use super::render::{render_face_sized, IMAGE_SIZE};
use super::spec::{sample_aus, BackgroundSpec, IdentitySpec, PoseSpec, SceneSpec};

/// Probability that the target scene gets a freshly sampled pose (and,
/// independently, background) rather than reusing the identity scene's.
pub const RESAMPLE_PROB: f64 = 0.9;

/// Two renders of one identity, the AU change between them, and the
/// condition image built from the target.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub identity_image: SceneImage,
    pub target_image: SceneImage,
    pub au_delta: AuDelta,
    pub condition_image: SceneImage,
}

impl TrainingPair {
    pub fn identity_scene(&self) -> &SceneSpec {
        self.identity_image.provenance.as_ref().expect("rendered pair carries provenance")
    }

    pub fn target_scene(&self) -> &SceneSpec {
        self.target_image.provenance.as_ref().expect("rendered pair carries provenance")
    }
}

/// Samples the two scene specs of a pair without rendering them.
pub fn sample_pair_scenes(identity: &IdentitySpec, rng_seed: u64) -> Result<(SceneSpec, SceneSpec)> {
    identity.validate()?;
    let mut rng = rng::seeded(rng_seed);
    let src_pose = PoseSpec::sample(&mut rng);
    let src_bg = BackgroundSpec::sample(&mut rng);
    let src_aus = sample_aus(&mut rng);
    let resample_pose = rand::Rng::random::<f64>(&mut rng) < RESAMPLE_PROB;
    let tgt_pose = if resample_pose { PoseSpec::sample(&mut rng) } else { src_pose };
    let resample_bg = rand::Rng::random::<f64>(&mut rng) < RESAMPLE_PROB;
    let tgt_bg = if resample_bg { BackgroundSpec::sample(&mut rng) } else { src_bg };
    let tgt_aus = sample_aus(&mut rng);
    Ok((
        SceneSpec {
            identity: identity.clone(),
            pose: src_pose,
            background: src_bg,
            aus: src_aus,
        },
        SceneSpec {
            identity: identity.clone(),
            pose: tgt_pose,
            background: tgt_bg,
            aus: tgt_aus,
        },
    ))
}

/// Renders a seeded training pair. The same `(identity, seed)` always
/// produces the same pair.
pub fn make_pair(identity: &IdentitySpec, rng_seed: u64) -> Result<TrainingPair> {
    make_pair_sized(identity, rng_seed, IMAGE_SIZE)
}

/// [`make_pair`] rendered at `size` pixels.
pub fn make_pair_sized(identity: &IdentitySpec, rng_seed: u64, size: usize) -> Result<TrainingPair> {
    let (src, tgt) = sample_pair_scenes(identity, rng_seed)?;
    let identity_image = render_face_sized(&src, size)?;
    let target_image = render_face_sized(&tgt, size)?;
    let condition_image = build_condition_image(&target_image)?;
    Ok(TrainingPair {
        au_delta: src.aus.delta_to(&tgt.aus),
        identity_image,
        target_image,
        condition_image,
    })
}
