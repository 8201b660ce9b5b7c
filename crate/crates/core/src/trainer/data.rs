//! In-memory training pairs, stored as 8-bit RGB and encoded per batch.

use candle::Tensor;

use crate::au::{AuDelta, AuVector};
use crate::diffcore::EditModel;
use crate::estimators::noisy_aus;
use crate::error::{Error, Result};
use crate::rng;
use crate::synthface::{Manifest, SceneImage, Split, TrainingPair};

#[derive(Debug, Clone)]
pub struct PairData {
    pub size: usize,
    identity: Vec<Vec<u8>>,
    target: Vec<Vec<u8>>,
    condition: Vec<Vec<u8>>,
    pub source_aus: Vec<AuVector>,
    pub target_aus: Vec<AuVector>,
    pub deltas: Vec<AuDelta>,
}

impl PairData {
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let mut out = Self::empty(manifest.header.image_size);
        for rec in manifest.records_in(split) {
            let imgs = manifest.load_pair(rec)?;
            out.push(&imgs.identity, &imgs.target, &imgs.condition, rec.au_delta);
        }
        Ok(out)
    }

    pub fn from_pairs(pairs: &[TrainingPair]) -> Result<Self> {
        let size = pairs.first().map(|p| p.identity_image.size).ok_or_else(|| Error::InsufficientData("no pairs".into()))?;
        let mut out = Self::empty(size);
        for p in pairs {
            out.push(&p.identity_image, &p.target_image, &p.condition_image, p.au_delta);
        }
        Ok(out)
    }

    fn empty(size: usize) -> Self {
        Self {
            size,
            identity: Vec::new(),
            target: Vec::new(),
            condition: Vec::new(),
            source_aus: Vec::new(),
            target_aus: Vec::new(),
            deltas: Vec::new(),
        }
    }

    fn push(&mut self, identity: &SceneImage, target: &SceneImage, condition: &SceneImage, delta: AuDelta) {
        self.identity.push(identity.to_rgb8());
        self.target.push(target.to_rgb8());
        self.condition.push(condition.to_rgb8());
        let src = identity.provenance.as_ref().map(|s| s.aus).unwrap_or_else(AuVector::zeros);
        let tgt = target.provenance.as_ref().map(|s| s.aus).unwrap_or_else(AuVector::zeros);
        self.source_aus.push(src);
        self.target_aus.push(tgt);
        self.deltas.push(delta);
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Keeps the first `n` pairs.
    pub fn truncate(&mut self, n: usize) {
        self.identity.truncate(n);
        self.target.truncate(n);
        self.condition.truncate(n);
        self.source_aus.truncate(n);
        self.target_aus.truncate(n);
        self.deltas.truncate(n);
    }

    /// Replaces every delta with one computed from noisy estimates of the
    /// source and target AUs: each oracle AU gets `N(0, sigma^2)` noise and
    /// is clamped to the AU scale. The noise is fixed per pair.
    pub fn apply_label_noise(&mut self, sigma: f64, seed: u64) {
        for i in 0..self.len() {
            let mut r = rng::seeded(rng::derive_seed(seed, i as u64));
            let src = noisy_aus(&self.source_aus[i], sigma, &mut r);
            let tgt = noisy_aus(&self.target_aus[i], sigma, &mut r);
            self.deltas[i] = src.delta_to(&tgt);
        }
    }

    fn images(&self, store: &[Vec<u8>], idx: &[usize]) -> Result<Vec<SceneImage>> {
        idx.iter().map(|&i| SceneImage::from_rgb8(self.size, &store[i])).collect()
    }

    /// Identity latents `s`, target latents `z` and condition latents `g`
    /// for the given pair indices.
    pub fn latents(&self, model: &EditModel, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let ids = self.images(&self.identity, idx)?;
        let tgts = self.images(&self.target, idx)?;
        let conds = self.images(&self.condition, idx)?;
        Ok((
            model.encode_images(&refs(&ids))?,
            model.encode_images(&refs(&tgts))?,
            model.encode_conditions(&refs(&conds))?,
        ))
    }

    pub fn identity_image(&self, i: usize) -> Result<SceneImage> {
        SceneImage::from_rgb8(self.size, &self.identity[i])
    }
}

fn refs(v: &[SceneImage]) -> Vec<&SceneImage> {
    v.iter().collect()
}
