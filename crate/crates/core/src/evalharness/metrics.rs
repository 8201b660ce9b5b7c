//! The four edit metrics. Image-level wrappers call an estimator; the
//! vector-level functions are pure.

use crate::au::{AuVector, NUM_AUS};
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::synthface::{PoseSpec, SceneImage};

/// Pixels within this distance of the face mask are excluded from the
/// background metric.
pub const MASK_DILATION_PX: usize = 2;

/// Mean over the 12 components of `(estimated - target)^2`.
pub fn au_squared_error(estimated: &AuVector, target: &AuVector) -> f64 {
    (0..NUM_AUS).map(|i| (estimated.get(i) - target.get(i)).powi(2)).sum::<f64>() / NUM_AUS as f64
}

/// Batch AU MSE: the mean of [`au_squared_error`] over items. Estimator
/// failures carry the item index.
pub fn au_mse(edited: &[&SceneImage], targets: &[AuVector], estimator: &Estimator) -> Result<f64> {
    if edited.len() != targets.len() || edited.is_empty() {
        return Err(Error::Shape(format!("{} images for {} targets", edited.len(), targets.len())));
    }
    let mut total = 0.0;
    for (i, (img, t)) in edited.iter().zip(targets).enumerate() {
        let rep = estimator.estimate(img).map_err(|e| Error::EstimatorItem {
            index: i,
            source: Box::new(e),
        })?;
        total += au_squared_error(&rep.aus, t);
    }
    Ok(total / edited.len() as f64)
}

/// Euclidean distance between two embeddings.
pub fn embedding_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn id_l2(edited: &SceneImage, identity: &SceneImage, estimator: &Estimator) -> Result<f64> {
    let a = estimator.estimate(edited)?;
    let b = estimator.estimate(identity)?;
    Ok(embedding_l2(&a.id_embedding, &b.id_embedding))
}

/// RMSE over the 4 pose proxies (offsets divided by the image width).
pub fn pose_rmse_of(a: &PoseSpec, b: &PoseSpec, image_width: usize) -> f64 {
    let (pa, pb) = (a.normalized(image_width), b.normalized(image_width));
    (pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4.0).sqrt()
}

pub fn pose_rmse(edited: &SceneImage, identity: &SceneImage, estimator: &Estimator) -> Result<f64> {
    let a = estimator.estimate(edited)?;
    let b = estimator.estimate(identity)?;
    Ok(pose_rmse_of(&a.pose, &b.pose, identity.size))
}

/// Mask grown by a disc of radius `radius`.
pub fn dilate(mask: &[bool], size: usize, radius: usize) -> Vec<bool> {
    let r = radius as i64;
    let mut out = vec![false; mask.len()];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            if !mask[(y * size as i64 + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if dx * dx + dy * dy <= r * r && nx >= 0 && ny >= 0 && nx < size as i64 && ny < size as i64 {
                        out[(ny * size as i64 + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundRmse {
    pub value: f64,
    /// Set when the dilated mask covers the whole image; `value` is then 0.
    pub fully_masked: bool,
}

/// RMSE over the pixels outside the identity's face mask (dilated by
/// [`MASK_DILATION_PX`]), all three channels.
pub fn background_rmse(edited: &SceneImage, identity: &SceneImage) -> Result<BackgroundRmse> {
    let mask = identity.face_mask.as_ref().ok_or(Error::MissingCondition("face_mask of the identity image"))?;
    if edited.size != identity.size {
        return Err(Error::Resolution {
            got_w: edited.size,
            got_h: edited.size,
            want: identity.size,
        });
    }
    let mask = dilate(mask, identity.size, MASK_DILATION_PX);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, masked) in mask.iter().enumerate() {
        if *masked {
            continue;
        }
        for c in 0..3 {
            let d = (edited.pixels[3 * k + c] - identity.pixels[3 * k + c]) as f64;
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Ok(BackgroundRmse {
            value: 0.0,
            fully_masked: true,
        });
    }
    Ok(BackgroundRmse {
        value: (sum / count as f64).sqrt(),
        fully_masked: false,
    })
}
