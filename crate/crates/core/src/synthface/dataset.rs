//! On-disk dataset of training pairs.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl          header line, then one record per pair
//! images/000000_id.png    identity image of pair 0
//! images/000000_tgt.png   target image of pair 0
//! images/000000_cond.png  condition image of pair 0
//! ```
//!
//! The first manifest line is a [`ManifestHeader`] with
//! `"format": "facelab-manifest"` and an integer `version`; every following
//! line is a [`PairRecord`]. Records are written in pair order and all
//! floating-point values use shortest round-trip formatting, so regenerating
//! with the same arguments produces a byte-identical manifest.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::au::AuDelta;
use crate::error::{Error, Result};
use crate::rng;

use super::condition::build_condition_image;
use super::image::SceneImage;
use super::pair::sample_pair_scenes;
use super::render::{chin_landmarks, face_mask, render_face, IMAGE_SIZE};
use super::spec::{IdentitySpec, SceneSpec};

pub const MANIFEST_FORMAT: &str = "facelab-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl Splits {
    /// Partitions identity ids `0..n` by id: the first ~80% train, then
    /// ~10% validation, then ~10% test. With fewer than three identities
    /// the validation split is empty.
    pub fn by_identity(n: u32) -> Self {
        let tenth = ((n as f64) * 0.1).round() as u32;
        let n_test = tenth.max(1).min(n.saturating_sub(1));
        let n_val = if n >= 3 { tenth.max(1) } else { 0 };
        let n_train = n - n_test - n_val;
        Self {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        }
    }

    pub fn split_of(&self, id: u32) -> Option<Split> {
        if self.train.contains(&id) {
            Some(Split::Train)
        } else if self.val.contains(&id) {
            Some(Split::Val)
        } else if self.test.contains(&id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub n_pairs: usize,
    pub n_identities: u32,
    pub seed: u64,
    pub image_size: usize,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: usize,
    pub split: Split,
    pub identity_id: u32,
    pub identity_image: String,
    pub target_image: String,
    pub condition_image: String,
    pub identity_scene: SceneSpec,
    pub target_scene: SceneSpec,
    pub au_delta: AuDelta,
}

/// Loaded images of one pair, annotated from the stored scene specs.
#[derive(Debug, Clone)]
pub struct PairImages {
    pub identity: SceneImage,
    pub target: SceneImage,
    pub condition: SceneImage,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<PairRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::InsufficientData(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(&path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first)?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest {} v{} (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
                header.format, header.version
            )));
        }
        let mut records = Vec::with_capacity(header.n_pairs);
        for line in lines {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            root: dir.to_path_buf(),
            header,
            records,
        })
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn identity_ids(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.identity_id).collect()
    }

    pub fn num_images(&self) -> usize {
        self.records.len() * 2
    }

    /// Loads a stored image and re-attaches mask, landmarks and provenance
    /// from its scene spec.
    pub fn load_scene_image(&self, rel: &str, scene: &SceneSpec) -> Result<SceneImage> {
        let mut img = SceneImage::load_png(&self.root.join(rel))?;
        img.face_mask = Some(face_mask(scene, img.size));
        img.chin_landmarks = Some(chin_landmarks(scene, img.size));
        img.provenance = Some(scene.clone());
        Ok(img)
    }

    pub fn load_pair(&self, rec: &PairRecord) -> Result<PairImages> {
        let identity = self.load_scene_image(&rec.identity_image, &rec.identity_scene)?;
        let target = self.load_scene_image(&rec.target_image, &rec.target_scene)?;
        let mut condition = SceneImage::load_png(&self.root.join(&rec.condition_image))?;
        condition.provenance = Some(rec.target_scene.clone());
        Ok(PairImages {
            identity,
            target,
            condition,
        })
    }
}

/// Identity specs of a dataset, derived from its seed.
pub fn dataset_identities(n_identities: u32, seed: u64) -> Vec<IdentitySpec> {
    let mut r = rng::seeded(rng::derive_seed(seed, 0x1D));
    (0..n_identities).map(|k| IdentitySpec::sample(k, &mut r)).collect()
}

/// Renders `n_pairs` pairs over `n_identities` identities (assigned
/// round-robin) and writes images plus manifest into `out`.
pub fn generate_dataset(n_pairs: usize, n_identities: u32, seed: u64, out: &Path) -> Result<Manifest> {
    if n_pairs < 1 {
        return Err(Error::validation("n_pairs", "must be at least 1"));
    }
    if n_identities < 2 {
        return Err(Error::validation("n_identities", "must be at least 2"));
    }
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let identities = dataset_identities(n_identities, seed);
    let splits = Splits::by_identity(n_identities);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        n_pairs,
        n_identities,
        seed,
        image_size: IMAGE_SIZE,
        splits: splits.clone(),
    };

    let mut records = Vec::with_capacity(n_pairs);
    for pair in 0..n_pairs {
        let identity = &identities[pair % identities.len()];
        let pair_seed = rng::derive_seed(seed, pair as u64 + 0x100);
        let (src, tgt) = sample_pair_scenes(identity, pair_seed)?;
        let id_img = render_face(&src)?;
        let tgt_img = render_face(&tgt)?;
        let cond_img = build_condition_image(&tgt_img)?;

        let rec = PairRecord {
            pair,
            split: splits.split_of(identity.identity_id).expect("every id is assigned a split"),
            identity_id: identity.identity_id,
            identity_image: format!("images/{pair:06}_id.png"),
            target_image: format!("images/{pair:06}_tgt.png"),
            condition_image: format!("images/{pair:06}_cond.png"),
            au_delta: src.aus.delta_to(&tgt.aus),
            identity_scene: src,
            target_scene: tgt,
        };
        id_img.save_png(&out.join(&rec.identity_image))?;
        tgt_img.save_png(&out.join(&rec.target_image))?;
        cond_img.save_png(&out.join(&rec.condition_image))?;
        records.push(rec);
    }

    let path = out.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let write_line = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        w.write_all(s.as_bytes()).and_then(|_| w.write_all(b"\n")).map_err(|e| Error::io(&path, e))
    };
    write_line(&mut w, serde_json::to_string(&header)?)?;
    for rec in &records {
        write_line(&mut w, serde_json::to_string(rec)?)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    Ok(Manifest {
        root: out.to_path_buf(),
        header,
        records,
    })
}
