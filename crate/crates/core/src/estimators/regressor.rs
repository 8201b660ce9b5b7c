//! Small convolutional regressor for AUs, pose, face shape and identity.

use std::collections::BTreeMap;
use std::path::Path;

use candle::{DType, Device, Module, Tensor, D};
use candle_nn::{VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EstimateReport, EstimateSource, FaceShape, EMBEDDING_DIM};
use crate::au::{AuVector, AU_MAX, NUM_AUS};
use crate::checkpoint::Checkpoint;
use crate::diffcore::codec::images_to_tensor;
use crate::diffcore::layers::{conv, deterministic_init, linear, linear_no_bias, Conv2d, Linear};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthface::spec::bounds;
use crate::synthface::{Manifest, PoseSpec, SceneImage, SceneSpec, Split};
use crate::trainer::{AdamW, AdamWConfig};

pub const REGRESSOR_KIND: &str = "au-regressor";
const SHAPE_BOUNDS: [(f64, f64); 5] = [
    bounds::FACE_WIDTH,
    bounds::FACE_HEIGHT,
    bounds::EYE_SPACING,
    bounds::EYE_SIZE,
    bounds::NOSE_LENGTH,
];
const POSE_BOUNDS: [(f64, f64); 4] = [bounds::OFFSET_X, bounds::OFFSET_Y, bounds::ROLL, bounds::SCALE];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub image_size: usize,
    /// Output channels of the stem conv followed by the stride-2 convs.
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Logit scale of the cosine identity classifier.
    pub embed_scale: f64,
    /// Weight of the identity classification term.
    pub id_weight: f64,
    /// Number of training identities; set by training.
    pub num_identities: usize,
    pub triplets: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: vec![16, 32, 64, 64, 64],
            hidden: 256,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            embed_scale: 10.0,
            id_weight: 0.1,
            num_identities: 0,
            triplets: 2000,
        }
    }
}

/// Validation metrics recorded in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorMetrics {
    pub au_mae: f64,
    pub au_mae_per_au: Vec<f64>,
    /// Mean absolute error of the two offsets, in pixels.
    pub pose_offset_mae_px: f64,
    /// Fraction of random triplets with same-identity distance below
    /// different-identity distance; `None` with fewer than two identities.
    pub triplet_accuracy: Option<f64>,
    pub images: usize,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone)]
struct Net {
    convs: Vec<Conv2d>,
    fc: Linear,
    au: Linear,
    pose: Linear,
    shape: Linear,
    embed: Linear,
    classifier: Linear,
}

struct Heads {
    au: Tensor,
    pose: Tensor,
    shape: Tensor,
    embedding: Tensor,
}

impl Net {
    fn new(vb: VarBuilder, cfg: &RegressorConfig) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::validation("channels", "need at least one conv layer"));
        }
        let mut convs = Vec::new();
        let mut cin = 3;
        let mut size = cfg.image_size;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(if i == 0 {
                conv(vb.pp(format!("conv{i}")), cin, c, 3, 1, 1)?
            } else {
                size /= 2;
                conv(vb.pp(format!("conv{i}")), cin, c, 4, 2, 1)?
            });
            cin = c;
        }
        let flat = cin * size * size;
        Ok(Self {
            convs,
            fc: linear(flat, cfg.hidden, vb.pp("fc"))?,
            au: linear(cfg.hidden, NUM_AUS, vb.pp("au"))?,
            pose: linear(cfg.hidden, 4, vb.pp("pose"))?,
            shape: linear(cfg.hidden, 5, vb.pp("shape"))?,
            embed: linear(cfg.hidden, EMBEDDING_DIM, vb.pp("embed"))?,
            classifier: linear_no_bias(EMBEDDING_DIM, cfg.num_identities.max(1), vb.pp("classifier"))?,
        })
    }

    /// `x` is `(B, 3, S, S)` in `[0, 1]`.
    fn forward(&self, x: &Tensor) -> Result<Heads> {
        let mut h = x.affine(2.0, -1.0)?;
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
        }
        let h = self.fc.forward(&h.flatten_from(1)?)?.silu()?;
        let e = self.embed.forward(&h)?;
        let norm = (e.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(Heads {
            au: self.au.forward(&h)?,
            pose: self.pose.forward(&h)?,
            shape: self.shape.forward(&h)?,
            embedding: e.broadcast_div(&norm)?,
        })
    }
}

fn to_unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

fn from_unit(u: f64, (lo, hi): (f64, f64)) -> f64 {
    (lo + (u + 1.0) * 0.5 * (hi - lo)).clamp(lo, hi)
}

fn pose_array(p: &PoseSpec) -> [f64; 4] {
    [p.offset_x, p.offset_y, p.roll, p.scale]
}

/// Normalised regression targets `(aus, pose, shape)` of one scene.
fn targets(scene: &SceneSpec) -> ([f64; NUM_AUS], [f64; 4], [f64; 5]) {
    let mut au = [0.0; NUM_AUS];
    for (i, a) in au.iter_mut().enumerate() {
        *a = scene.aus.get(i) / AU_MAX;
    }
    let p = pose_array(&scene.pose);
    let pose = std::array::from_fn(|i| to_unit(p[i], POSE_BOUNDS[i]));
    let s = FaceShape::of(&scene.identity).to_array();
    let shape = std::array::from_fn(|i| to_unit(s[i], SHAPE_BOUNDS[i]));
    (au, pose, shape)
}

/// Labelled images held as 8-bit RGB.
struct ImageSet {
    size: usize,
    pixels: Vec<Vec<u8>>,
    scenes: Vec<SceneSpec>,
}

impl ImageSet {
    fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let mut out = Self {
            size: manifest.header.image_size,
            pixels: Vec::new(),
            scenes: Vec::new(),
        };
        for rec in manifest.records_in(split) {
            for (rel, scene) in [(&rec.identity_image, &rec.identity_scene), (&rec.target_image, &rec.target_scene)] {
                let img = SceneImage::load_png(&manifest.root.join(rel))?;
                out.pixels.push(img.to_rgb8());
                out.scenes.push(scene.clone());
            }
        }
        Ok(out)
    }

    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn images(&self, idx: &[usize]) -> Result<Vec<SceneImage>> {
        idx.iter().map(|&i| SceneImage::from_rgb8(self.size, &self.pixels[i])).collect()
    }
}

/// Trained estimator with its configuration and validation metrics.
#[derive(Clone)]
pub struct Regressor {
    pub config: RegressorConfig,
    pub metrics: Option<RegressorMetrics>,
    vars: VarMap,
    net: Net,
    device: Device,
}

impl std::fmt::Debug for Regressor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Regressor")
            .field("config", &self.config)
            .field("metrics", &self.metrics)
            .finish_non_exhaustive()
    }
}

impl Regressor {
    pub fn new(config: RegressorConfig, device: &Device) -> Result<Self> {
        let vars = VarMap::new();
        let net = Net::new(VarBuilder::from_varmap(&vars, DType::F32, device), &config)?;
        deterministic_init(&vars, config.seed, &[])?;
        Ok(Self {
            config,
            metrics: None,
            vars,
            net,
            device: device.clone(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    fn batch_tensor(&self, imgs: &[&SceneImage]) -> Result<Tensor> {
        images_to_tensor(imgs, self.config.image_size, &self.device)
    }

    pub fn estimate(&self, img: &SceneImage) -> Result<EstimateReport> {
        Ok(self.estimate_batch(&[img])?.remove(0))
    }

    /// Deterministic batched inference. Every image must be at the training
    /// resolution.
    pub fn estimate_batch(&self, imgs: &[&SceneImage]) -> Result<Vec<EstimateReport>> {
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(64) {
            let heads = self.net.forward(&self.batch_tensor(chunk)?)?;
            let au = heads.au.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let pose = heads.pose.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let shape = heads.shape.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let emb = heads.embedding.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            for i in 0..chunk.len() {
                let aus: Vec<f64> = au[i].iter().map(|v| v * AU_MAX).collect();
                let p: [f64; 4] = std::array::from_fn(|k| from_unit(pose[i][k], POSE_BOUNDS[k]));
                let s: [f64; 5] = std::array::from_fn(|k| from_unit(shape[i][k], SHAPE_BOUNDS[k]));
                let norm = emb[i].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                out.push(EstimateReport {
                    aus: AuVector::from_slice(&aus)?,
                    pose: PoseSpec {
                        offset_x: p[0],
                        offset_y: p[1],
                        roll: p[2],
                        scale: p[3],
                    },
                    id_embedding: emb[i].iter().map(|x| x / norm).collect(),
                    shape: FaceShape {
                        face_width: s[0],
                        face_height: s[1],
                        eye_spacing: s[2],
                        eye_size: s[3],
                        nose_length: s[4],
                    },
                    source: EstimateSource::Regressor,
                });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(REGRESSOR_KIND, &self.config)?;
        c.insert_varmap("", &self.vars)?;
        c.meta = serde_json::to_value(&self.metrics)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind(REGRESSOR_KIND)?;
        let config: RegressorConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad regressor config: {e}", path.display())))?;
        let mut r = Self::new(config, device)?;
        ckpt.load_varmap("", &r.vars)?;
        r.metrics = serde_json::from_value(ckpt.meta.clone()).unwrap_or(None);
        Ok(r)
    }

    fn loss(&self, data: &ImageSet, idx: &[usize], classes: &BTreeMap<u32, u32>) -> Result<Tensor> {
        let imgs = data.images(idx)?;
        let refs: Vec<&SceneImage> = imgs.iter().collect();
        let heads = self.net.forward(&self.batch_tensor(&refs)?)?;
        let (mut au, mut pose, mut shape, mut cls) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in idx {
            let (a, p, s) = targets(&data.scenes[i]);
            au.extend(a.map(|v| v as f32));
            pose.extend(p.map(|v| v as f32));
            shape.extend(s.map(|v| v as f32));
            cls.push(classes[&data.scenes[i].identity.identity_id]);
        }
        let b = idx.len();
        let dev = &self.device;
        let mse = |pred: &Tensor, t: Vec<f32>, w: usize| -> Result<Tensor> {
            Ok((pred - Tensor::from_vec(t, (b, w), dev)?)?.sqr()?.mean_all()?)
        };
        let logits = self.net.classifier.forward(&heads.embedding)?.affine(self.config.embed_scale, 0.0)?;
        let ce = candle_nn::loss::cross_entropy(&logits, &Tensor::from_vec(cls, b, dev)?)?;
        let total = (mse(&heads.au, au, NUM_AUS)? + mse(&heads.pose, pose, 4)?)?;
        let total = ((total + mse(&heads.shape, shape, 5)?)? + ce.affine(self.config.id_weight, 0.0)?)?;
        Ok(total)
    }
}

fn evaluate(reg: &Regressor, data: &ImageSet, seed: u64, n_triplets: usize) -> Result<RegressorMetrics> {
    let mut per_au = vec![0.0; NUM_AUS];
    let mut pose_err = 0.0;
    let mut embeddings = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let imgs = data.images(chunk)?;
        let refs: Vec<&SceneImage> = imgs.iter().collect();
        for (rep, &i) in reg.estimate_batch(&refs)?.into_iter().zip(chunk) {
            let s = &data.scenes[i];
            for (k, e) in per_au.iter_mut().enumerate() {
                *e += (rep.aus.get(k) - s.aus.get(k)).abs();
            }
            pose_err += (rep.pose.offset_x - s.pose.offset_x).abs() + (rep.pose.offset_y - s.pose.offset_y).abs();
            embeddings.push(rep.id_embedding);
        }
    }
    let n = data.len().max(1) as f64;
    per_au.iter_mut().for_each(|e| *e /= n);
    let ids: Vec<u32> = data.scenes.iter().map(|s| s.identity.identity_id).collect();
    Ok(RegressorMetrics {
        au_mae: per_au.iter().sum::<f64>() / NUM_AUS as f64,
        au_mae_per_au: per_au,
        pose_offset_mae_px: pose_err / (2.0 * n),
        triplet_accuracy: triplet_accuracy(&embeddings, &ids, n_triplets, seed),
        images: data.len(),
        final_train_loss: f64::NAN,
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of seeded random triplets `(anchor, positive, negative)` where
/// the anchor is closer to the same-identity positive.
pub fn triplet_accuracy(embeddings: &[Vec<f64>], ids: &[u32], n: usize, seed: u64) -> Option<f64> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let usable: Vec<u32> = by_id.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| *k).collect();
    if usable.is_empty() || by_id.len() < 2 || n == 0 {
        return None;
    }
    let mut r = rng::seeded(seed);
    let mut wins = 0;
    for _ in 0..n {
        let id = usable[r.random_range(0..usable.len())];
        let members = &by_id[&id];
        let a = members[r.random_range(0..members.len())];
        let p = loop {
            let p = members[r.random_range(0..members.len())];
            if p != a {
                break p;
            }
        };
        let neg = loop {
            let k = r.random_range(0..ids.len());
            if ids[k] != id {
                break k;
            }
        };
        if l2(&embeddings[a], &embeddings[p]) < l2(&embeddings[a], &embeddings[neg]) {
            wins += 1;
        }
    }
    Some(wins as f64 / n as f64)
}

/// Trains on the train split of `manifest` and reports metrics on the
/// validation split, joined by the test split when validation holds fewer
/// than two identities.
pub fn train_regressor(manifest: &Manifest, mut config: RegressorConfig) -> Result<Regressor> {
    let train = ImageSet::load(manifest, Split::Train)?;
    if train.len() < 1000 {
        return Err(Error::InsufficientData(format!(
            "regressor training needs at least 1000 images, manifest has {} in the train split",
            train.len()
        )));
    }
    let mut val = ImageSet::load(manifest, Split::Val)?;
    let val_ids: std::collections::BTreeSet<u32> = val.scenes.iter().map(|s| s.identity.identity_id).collect();
    if val_ids.len() < 2 {
        let test = ImageSet::load(manifest, Split::Test)?;
        val.pixels.extend(test.pixels);
        val.scenes.extend(test.scenes);
    }
    if train.size != config.image_size {
        return Err(Error::Resolution {
            got_w: train.size,
            got_h: train.size,
            want: config.image_size,
        });
    }
    let classes: BTreeMap<u32, u32> = train
        .scenes
        .iter()
        .map(|s| s.identity.identity_id)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(k, id)| (id, k as u32))
        .collect();
    config.num_identities = classes.len();
    let mut reg = Regressor::new(config.clone(), &Device::Cpu)?;
    let mut opt = AdamW::new(
        &reg.vars,
        AdamWConfig {
            lr: config.lr,
            weight_decay: 1e-4,
            ..AdamWConfig::default()
        },
    )?;
    let mut r = rng::seeded(rng::derive_seed(config.seed, 0xE5));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut sum = 0.0;
        let mut count = 0;
        for idx in order.chunks(config.batch_size) {
            let loss = reg.loss(&train, idx, &classes)?;
            let v = loss.to_scalar::<f32>()? as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("regressor loss {v} in epoch {epoch}")));
            }
            opt.step(&loss.backward()?)?;
            sum += v;
            count += 1;
        }
        last = sum / count as f64;
        tracing::info!(epoch, loss = last, "regressor");
    }
    let mut metrics = evaluate(&reg, &val, rng::derive_seed(config.seed, 0x7e), config.triplets)?;
    metrics.final_train_loss = last;
    reg.metrics = Some(metrics);
    Ok(reg)
}
