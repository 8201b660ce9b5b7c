//! Image-level editing: annotate, build the condition image, encode, sample,
//! decode.

use super::{sample, GuidanceConfig, PreparedConditions, SampleOptions, SamplerKind};
use crate::au::AuDelta;
use crate::diffcore::EditModel;
use crate::error::{Error, Result};
use crate::estimators::{annotate, Estimator};
use crate::synthface::{build_condition_image, SceneImage};

/// Largest number of edits sampled together.
pub const MAX_EDIT_BATCH: usize = 16;

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub identity_image: SceneImage,
    pub au_delta: AuDelta,
    pub options: SampleOptions,
    pub seed: u64,
}

impl EditRequest {
    pub fn new(identity_image: SceneImage, au_delta: AuDelta, seed: u64) -> Self {
        Self {
            identity_image,
            au_delta,
            options: SampleOptions::default(),
            seed,
        }
    }

    pub fn with_guidance(mut self, guidance: GuidanceConfig) -> Self {
        self.options.guidance = guidance;
        self
    }

    pub fn with_sampler(mut self, sampler: SamplerKind, steps: usize) -> Self {
        self.options.sampler = sampler;
        self.options.steps = steps;
        self
    }

    pub fn validate(&self, model: &EditModel) -> Result<()> {
        self.au_delta.check_inference_range()?;
        self.options.validate()?;
        self.identity_image.ensure_size(model.config.image_size)
    }
}

pub fn edit_image(model: &EditModel, estimator: Option<&Estimator>, req: &EditRequest) -> Result<SceneImage> {
    Ok(edit_batch(model, estimator, std::slice::from_ref(req))?.remove(0))
}

/// Edits several images. Requests with equal sampling options are sampled
/// together in chunks of [`MAX_EDIT_BATCH`]; results keep request order.
pub fn edit_batch(model: &EditModel, estimator: Option<&Estimator>, reqs: &[EditRequest]) -> Result<Vec<SceneImage>> {
    for r in reqs {
        r.validate(model)?;
    }
    let mut out: Vec<Option<SceneImage>> = vec![None; reqs.len()];
    let mut pending: Vec<usize> = (0..reqs.len()).collect();
    while let Some(&first) = pending.first() {
        let opts = reqs[first].options;
        let (group, rest): (Vec<usize>, Vec<usize>) = pending.iter().partition(|&&i| reqs[i].options == opts);
        pending = rest;
        for chunk in group.chunks(MAX_EDIT_BATCH) {
            let items: Vec<&EditRequest> = chunk.iter().map(|&i| &reqs[i]).collect();
            for (i, img) in chunk.iter().zip(edit_chunk(model, estimator, &items, &opts)?) {
                out[*i] = Some(img);
            }
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every request is sampled")).collect())
}

fn edit_chunk(model: &EditModel, estimator: Option<&Estimator>, reqs: &[&EditRequest], opts: &SampleOptions) -> Result<Vec<SceneImage>> {
    let mut conditions = Vec::with_capacity(reqs.len());
    for r in reqs {
        conditions.push(build_condition_image(&annotate(&r.identity_image, estimator)?)?);
    }
    let ids: Vec<&SceneImage> = reqs.iter().map(|r| &r.identity_image).collect();
    let conds: Vec<&SceneImage> = conditions.iter().collect();
    let s = model.encode_images(&ids)?;
    let g = model.encode_conditions(&conds)?;
    let deltas: Vec<AuDelta> = reqs.iter().map(|r| r.au_delta).collect();
    let seeds: Vec<u64> = reqs.iter().map(|r| r.seed).collect();
    let prepared = PreparedConditions::new(model, &s, &g, &deltas)?;
    let z = sample(model, &prepared, opts, &seeds)?;
    model.decode(&z)
}

/// Transfers the driver's expression onto `source`. The delta is the
/// estimated driver AUs minus the estimated source AUs; the returned image
/// keeps the source pose since the condition image comes from the source.
pub fn transfer_expression(
    model: &EditModel,
    estimator: &Estimator,
    source: &SceneImage,
    driver: &SceneImage,
    options: SampleOptions,
    seed: u64,
) -> Result<(SceneImage, AuDelta)> {
    let src = estimator.estimate(source).map_err(|e| item_error(0, e))?;
    let drv = estimator.estimate(driver).map_err(|e| item_error(1, e))?;
    let delta = src.aus.delta_to(&drv.aus);
    let req = EditRequest {
        identity_image: source.clone(),
        au_delta: delta,
        options,
        seed,
    };
    Ok((edit_image(model, Some(estimator), &req)?, delta))
}

fn item_error(index: usize, e: Error) -> Error {
    Error::EstimatorItem {
        index,
        source: Box::new(e),
    }
}
