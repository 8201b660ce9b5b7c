//! AU, pose and identity estimators: an exact oracle for rendered images and
//! a small trained regressor for everything else.

pub mod oracle;
pub mod regressor;

use serde::{Deserialize, Serialize};

use crate::au::AuVector;
use crate::error::{Error, Result};
use crate::synthface::render::{chin_landmarks, face_mask};
use crate::synthface::{BackgroundSpec, IdentitySpec, PoseSpec, SceneImage, SceneSpec};

pub use oracle::{identity_embedding, noisy_aus, oracle_estimate, DEFAULT_LABEL_NOISE_SIGMA};
pub use regressor::{train_regressor, Regressor, RegressorConfig, RegressorMetrics};

pub const EMBEDDING_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Oracle,
    Regressor,
}

/// Face geometry in face-local pixels (the geometric part of an identity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceShape {
    pub face_width: f64,
    pub face_height: f64,
    pub eye_spacing: f64,
    pub eye_size: f64,
    pub nose_length: f64,
}

impl FaceShape {
    pub fn of(id: &IdentitySpec) -> Self {
        Self {
            face_width: id.face_width,
            face_height: id.face_height,
            eye_spacing: id.eye_spacing,
            eye_size: id.eye_size,
            nose_length: id.nose_length,
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.face_width, self.face_height, self.eye_spacing, self.eye_size, self.nose_length]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub aus: AuVector,
    pub pose: PoseSpec,
    /// Unit-norm identity embedding of length [`EMBEDDING_DIM`].
    pub id_embedding: Vec<f64>,
    pub shape: FaceShape,
    pub source: EstimateSource,
}

impl EstimateReport {
    /// Approximate scene behind the image; colours are placeholders.
    pub fn scene(&self) -> SceneSpec {
        let mut id = IdentitySpec::reference(0);
        let s = self.shape;
        id.face_width = s.face_width;
        id.face_height = s.face_height;
        id.eye_spacing = s.eye_spacing;
        id.eye_size = s.eye_size;
        id.nose_length = s.nose_length;
        SceneSpec {
            identity: id,
            pose: self.pose,
            background: BackgroundSpec::solid([0.5, 0.5, 0.5]),
            aus: self.aus,
        }
    }
}

/// Either estimator behind one interface.
#[derive(Debug, Clone)]
pub enum Estimator {
    Oracle,
    Regressor(Box<Regressor>),
}

impl Estimator {
    pub fn estimate(&self, img: &SceneImage) -> Result<EstimateReport> {
        match self {
            Self::Oracle => oracle_estimate(img),
            Self::Regressor(r) => r.estimate(img),
        }
    }

    pub fn estimate_batch(&self, imgs: &[&SceneImage]) -> Result<Vec<EstimateReport>> {
        match self {
            Self::Oracle => imgs.iter().map(|i| oracle_estimate(i)).collect(),
            Self::Regressor(r) => r.estimate_batch(imgs),
        }
    }
}

/// Returns `img` with face mask and chin landmarks. Existing annotations are
/// kept; otherwise they are derived from the provenance or, failing that,
/// from the estimator's reconstruction of the scene.
pub fn annotate(img: &SceneImage, estimator: Option<&Estimator>) -> Result<SceneImage> {
    if img.face_mask.is_some() && img.chin_landmarks.is_some() {
        return Ok(img.clone());
    }
    let scene = match (&img.provenance, estimator) {
        (Some(s), _) => s.clone(),
        (None, Some(e)) => e.estimate(img)?.scene(),
        (None, None) => return Err(Error::MissingCondition("face annotations (no provenance and no estimator)")),
    };
    let mut out = img.clone();
    out.face_mask = Some(face_mask(&scene, img.size));
    out.chin_landmarks = Some(chin_landmarks(&scene, img.size));
    Ok(out)
}
