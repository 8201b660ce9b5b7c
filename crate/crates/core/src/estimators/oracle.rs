//! Ground-truth estimates read from an image's provenance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EstimateReport, EstimateSource, FaceShape, EMBEDDING_DIM};
use crate::au::{AuVector, NUM_AUS};
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::rng;
use crate::synthface::{IdentitySpec, SceneImage};

/// Default standard deviation of the noisy-label mode.
pub const DEFAULT_LABEL_NOISE_SIGMA: f64 = 0.15;

/// Unit vector determined by the identity's five geometric fields: their
/// little-endian `f64` bytes are hashed with SHA-256, the digest seeds a
/// ChaCha8 stream, 32 standard normals are drawn and the result normalised.
/// Pose, background, colours and AUs do not enter.
pub fn identity_embedding(id: &IdentitySpec) -> Vec<f64> {
    let mut bytes = Vec::with_capacity(40);
    for v in FaceShape::of(id).to_array() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = hex::decode(sha256_hex(&bytes)).expect("hex digest");
    let seed: [u8; 32] = digest.try_into().expect("32-byte digest");
    let mut r = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng::normal_f64(&mut r)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn oracle_estimate(img: &SceneImage) -> Result<EstimateReport> {
    let scene = img.provenance.as_ref().ok_or(Error::MissingProvenance)?;
    Ok(EstimateReport {
        aus: scene.aus,
        pose: scene.pose,
        id_embedding: identity_embedding(&scene.identity),
        shape: FaceShape::of(&scene.identity),
        source: EstimateSource::Oracle,
    })
}

/// Oracle AUs with independent `N(0, sigma^2)` noise per component, clamped
/// to the intensity range.
pub fn noisy_aus<R: Rng>(aus: &AuVector, sigma: f64, r: &mut R) -> AuVector {
    let mut out = [0.0; NUM_AUS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = aus.get(i) + sigma * rng::normal_f64(r);
    }
    AuVector::new(out).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{render_face, SceneSpec};

    #[test]
    fn embedding_ignores_colour_and_id() {
        let a = IdentitySpec::reference(1);
        let mut b = a.clone();
        b.skin_tone = [0.6, 0.5, 0.4];
        b.identity_id = 9;
        assert_eq!(identity_embedding(&a), identity_embedding(&b));
        b.eye_size += 0.1;
        assert_ne!(identity_embedding(&a), identity_embedding(&b));
    }

    #[test]
    fn provenance_is_required() {
        let img = render_face(&SceneSpec::neutral(IdentitySpec::reference(0))).unwrap();
        assert!(oracle_estimate(&img).is_ok());
        assert!(matches!(oracle_estimate(&img.strip()), Err(Error::MissingProvenance)));
    }
}
