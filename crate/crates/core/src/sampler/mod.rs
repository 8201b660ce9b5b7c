//! Reverse diffusion (DDPM and deterministic DDIM) with classifier-free
//! guidance over the AU condition, plus the edit and transfer pipelines.

pub mod edit;

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::au::AuDelta;
use crate::diffcore::{AuEmbedding, ConditionBundle, EditModel, IdCondition, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

pub use edit::{edit_batch, edit_image, transfer_expression, EditRequest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { alpha: 3.0, enabled: true }
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self { alpha: 1.0, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::validation("alpha", "must be a finite number >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub guidance: GuidanceConfig,
    pub sampler: SamplerKind,
    /// DDIM step count; DDPM always walks every timestep.
    pub steps: usize,
    /// Clamp each predicted clean latent to the codec range `[-1, 1]`.
    pub clip_denoised: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            sampler: SamplerKind::Ddim,
            steps: 50,
            clip_denoised: true,
        }
    }
}

impl SampleOptions {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.steps == 0 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Guided noise `eps_u + alpha (eps_c - eps_u)`, evaluated as
/// `(1 - alpha) eps_u + alpha eps_c` so that `alpha = 1` returns `eps_c` and
/// `alpha = 0` returns `eps_u` exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, alpha: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::Shape(format!(
            "guidance inputs differ in shape: {:?} vs {:?}",
            eps_uncond.dims(),
            eps_cond.dims()
        )));
    }
    Ok((eps_uncond.affine(1.0 - alpha, 0.0)? + eps_cond.affine(alpha, 0.0)?)?)
}

/// Everything the reverse process needs besides the noisy latent. The ID
/// features are computed once here and reused at every step.
pub struct PreparedConditions {
    pub id: IdCondition,
    pub cond_latent: Tensor,
    pub au: AuEmbedding,
    /// Embedding of the all-zero (dropped) AU vector for the unconditional
    /// branch.
    pub au_null: AuEmbedding,
}

impl PreparedConditions {
    pub fn new(model: &EditModel, identity: &Tensor, cond_latent: &Tensor, deltas: &[AuDelta]) -> Result<Self> {
        let b = identity.dim(0)?;
        if deltas.len() != b || cond_latent.dim(0)? != b {
            return Err(Error::Shape(format!(
                "batch mismatch: {b} identities, {} condition latents, {} deltas",
                cond_latent.dim(0)?,
                deltas.len()
            )));
        }
        Ok(Self {
            id: model.id_encode(identity)?,
            cond_latent: cond_latent.clone(),
            au: model.au_encode(&model.delta_tensor(deltas)?)?,
            au_null: model.au_encode(&model.delta_tensor(&vec![AuDelta::zeros(); b])?)?,
        })
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.cond_latent.dim(0)?)
    }

    fn bundle<'a>(&'a self, au: &'a AuEmbedding) -> ConditionBundle<'a> {
        ConditionBundle {
            au: Some(au),
            cond_latent: Some(&self.cond_latent),
            id: Some(&self.id),
        }
    }
}

/// Guided noise prediction at one timestep: one denoiser call unguided,
/// two (conditional and unconditional) when guidance is enabled.
pub fn predict_noise(model: &EditModel, z_t: &Tensor, t: usize, conds: &PreparedConditions, guidance: &GuidanceConfig) -> Result<Tensor> {
    let ts = vec![t; z_t.dim(0)?];
    let eps_c = model.denoise_step(z_t, &ts, conds.bundle(&conds.au))?;
    if !guidance.enabled {
        return Ok(eps_c);
    }
    let eps_u = model.denoise_step(z_t, &ts, conds.bundle(&conds.au_null))?;
    cfg_combine(&eps_u, &eps_c, guidance.alpha)
}

fn item_streams(seeds: &[u64]) -> Vec<SeededRng> {
    seeds.iter().map(|&s| rng::seeded(s)).collect()
}

/// Standard normal tensor of shape `(B, dims...)`, item `i` drawn from
/// `streams[i]`.
fn draw_noise(streams: &mut [SeededRng], item_dims: &[usize], like: &Tensor) -> Result<Tensor> {
    let n: usize = item_dims.iter().product();
    let mut data = Vec::with_capacity(n * streams.len());
    for r in streams.iter_mut() {
        data.extend(rng::normal_vec(r, n));
    }
    let mut dims = vec![streams.len()];
    dims.extend_from_slice(item_dims);
    Ok(Tensor::from_vec(data, dims, like.device())?.to_dtype(like.dtype())?)
}

fn check_finite(z: &Tensor, step: usize, t: usize) -> Result<()> {
    let s = z.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("non-finite latent at sampling step {step} (t = {t})")));
    }
    Ok(())
}

/// Predicted clean latent from `z_t` and a noise estimate.
fn predict_x0(z_t: &Tensor, eps: &Tensor, alpha_bar: f64, clip: bool) -> Result<Tensor> {
    let x0 = ((z_t - eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?)? / alpha_bar.sqrt())?;
    Ok(if clip { x0.clamp(-1.0, 1.0)? } else { x0 })
}

/// One DDPM posterior step from `t` to `t - 1`:
/// `mean = c0 x0 + ct z_t` with `c0 = sqrt(ab_prev) beta_t / (1 - ab_t)` and
/// `ct = sqrt(alpha_t) (1 - ab_prev) / (1 - ab_t)`, plus
/// `sqrt(beta_t (1 - ab_prev) / (1 - ab_t))` times fresh noise for `t > 0`.
pub fn ddpm_update(s: &NoiseSchedule, z_t: &Tensor, eps: &Tensor, t: usize, noise: Option<&Tensor>, clip: bool) -> Result<Tensor> {
    let ab = s.alpha_bars[t];
    let ab_prev = if t == 0 { 1.0 } else { s.alpha_bars[t - 1] };
    let beta = s.betas[t];
    let x0 = predict_x0(z_t, eps, ab, clip)?;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = s.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = (x0.affine(c0, 0.0)? + z_t.affine(ct, 0.0)?)?;
    match noise {
        Some(n) if t > 0 => {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab);
            Ok((mean + n.affine(var.sqrt(), 0.0)?)?)
        }
        _ => Ok(mean),
    }
}

/// Deterministic DDIM step from timestep `t` to `t_prev` (`None` = clean):
/// `z' = sqrt(ab_prev) x0 + sqrt(1 - ab_prev) eps`.
pub fn ddim_update(s: &NoiseSchedule, z_t: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>, clip: bool) -> Result<Tensor> {
    let ab = s.alpha_bars[t];
    let ab_prev = t_prev.map(|p| s.alpha_bars[p]).unwrap_or(1.0);
    let x0 = predict_x0(z_t, eps, ab, clip)?;
    if t_prev.is_none() {
        return Ok(x0);
    }
    // with clipping, eps is re-derived so the update stays consistent with x0
    let eps = if clip {
        ((z_t - x0.affine(ab.sqrt(), 0.0)?)? / (1.0 - ab).sqrt())?
    } else {
        eps.clone()
    };
    Ok((x0.affine(ab_prev.sqrt(), 0.0)? + eps.affine((1.0 - ab_prev).sqrt(), 0.0)?)?)
}

/// Ascending timestep subsequence of length `steps` used by DDIM:
/// `floor(i T / steps)` for `i = 0..steps`.
pub fn ddim_timesteps(num_timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > num_timesteps {
        return Err(Error::validation("steps", format!("must be in 1..={num_timesteps}")));
    }
    Ok((0..steps).map(|i| i * num_timesteps / steps).collect())
}

fn initial_latent(model: &EditModel, conds: &PreparedConditions, streams: &mut [SeededRng]) -> Result<(Tensor, Vec<usize>)> {
    let dims = vec![model.latent_channels(), model.grid(), model.grid()];
    let z = draw_noise(streams, &dims, &conds.cond_latent)?;
    Ok((z, dims))
}

/// Ancestral DDPM loop from `z` at `t = T - 1` down to 0 with an arbitrary
/// noise predictor; `noise(step)` supplies the fresh noise for `t > 0`.
pub fn ddpm_loop(
    schedule: &NoiseSchedule,
    mut z: Tensor,
    clip: bool,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    mut noise: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    for (step, t) in (0..schedule.len()).rev().enumerate() {
        let eps = predict(&z, t)?;
        let n = if t > 0 { Some(noise(&z)?) } else { None };
        z = ddpm_update(schedule, &z, &eps, t, n.as_ref(), clip)?;
        check_finite(&z, step, t)?;
    }
    Ok(z)
}

/// Deterministic DDIM loop over the strided timesteps `ts` (ascending).
pub fn ddim_loop(
    schedule: &NoiseSchedule,
    mut z: Tensor,
    ts: &[usize],
    clip: bool,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    for (step, i) in (0..ts.len()).rev().enumerate() {
        let t = ts[i];
        let prev = if i == 0 { None } else { Some(ts[i - 1]) };
        let eps = predict(&z, t)?;
        z = ddim_update(schedule, &z, &eps, t, prev, clip)?;
        check_finite(&z, step, t)?;
    }
    Ok(z)
}

/// Ancestral DDPM sampling over all `T` timesteps. Item `i` uses `seeds[i]`
/// for its starting noise and every per-step draw.
pub fn ddpm_sample(model: &EditModel, conds: &PreparedConditions, opts: &SampleOptions, seeds: &[u64]) -> Result<Tensor> {
    opts.validate()?;
    check_seeds(conds, seeds)?;
    let mut streams = item_streams(seeds);
    let (z, dims) = initial_latent(model, conds, &mut streams)?;
    ddpm_loop(
        &model.schedule,
        z,
        opts.clip_denoised,
        |z, t| predict_noise(model, z, t, conds, &opts.guidance),
        |z| draw_noise(&mut streams, &dims, z),
    )
}

/// Deterministic (eta = 0) DDIM sampling over `opts.steps` strided
/// timesteps.
pub fn ddim_sample(model: &EditModel, conds: &PreparedConditions, opts: &SampleOptions, seeds: &[u64]) -> Result<Tensor> {
    opts.validate()?;
    check_seeds(conds, seeds)?;
    let ts = ddim_timesteps(model.schedule.len(), opts.steps)?;
    let mut streams = item_streams(seeds);
    let (z, _) = initial_latent(model, conds, &mut streams)?;
    ddim_loop(&model.schedule, z, &ts, opts.clip_denoised, |z, t| {
        predict_noise(model, z, t, conds, &opts.guidance)
    })
}

pub fn sample(model: &EditModel, conds: &PreparedConditions, opts: &SampleOptions, seeds: &[u64]) -> Result<Tensor> {
    match opts.sampler {
        SamplerKind::Ddpm => ddpm_sample(model, conds, opts, seeds),
        SamplerKind::Ddim => ddim_sample(model, conds, opts, seeds),
    }
}

/// Denoiser calls one sample costs.
pub fn expected_denoiser_calls(model: &EditModel, opts: &SampleOptions) -> usize {
    let steps = match opts.sampler {
        SamplerKind::Ddpm => model.schedule.len(),
        SamplerKind::Ddim => opts.steps,
    };
    steps * if opts.guidance.enabled { 2 } else { 1 }
}

fn check_seeds(conds: &PreparedConditions, seeds: &[u64]) -> Result<()> {
    let b = conds.batch()?;
    if seeds.len() != b {
        return Err(Error::Shape(format!("{} seeds for a batch of {b}", seeds.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::Device;

    #[test]
    fn cfg_combine_endpoints_and_arithmetic() {
        let dev = Device::Cpu;
        let u = Tensor::new(&[0.2f64, -1.3, 7.0], &dev).unwrap();
        let c = Tensor::new(&[0.5f64, 2.9, -0.1], &dev).unwrap();
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().to_vec1::<f64>().unwrap(), c.to_vec1::<f64>().unwrap());
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().to_vec1::<f64>().unwrap(), u.to_vec1::<f64>().unwrap());
        let g = cfg_combine(&u, &c, 3.0).unwrap().to_vec1::<f64>().unwrap();
        assert!((g[0] - 1.1).abs() < 1e-12);
        let bad = Tensor::new(&[1f64, 2.], &dev).unwrap();
        assert!(cfg_combine(&u, &bad, 3.0).is_err());
    }

    #[test]
    fn ddim_timesteps_are_strided() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![0, 250, 500, 750]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(ddim_timesteps(10, 0).is_err());
        assert!(ddim_timesteps(10, 11).is_err());
    }
}
