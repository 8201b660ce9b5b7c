//! Edit grid, suite runner, guidance sweep and ablation comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle::Device;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{au_squared_error, background_rmse, embedding_l2, pose_rmse_of};
use crate::au::{label, AuDelta, NUM_AUS};
use crate::checkpoint::file_hash;
use crate::diffcore::EditModel;
use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, Estimator};
use crate::rng;
use crate::sampler::{edit_batch, EditRequest, GuidanceConfig, SampleOptions, SamplerKind};
use crate::synthface::{Manifest, SceneImage, Split};
use crate::trainer::{summary_of, TrainSummary};

/// Guidance scales of the sweep.
pub const SWEEP_ALPHAS: [f64; 9] = [0.5, 1.5, 2.5, 3.0, 3.5, 4.5, 6.5, 9.5, 13.5];

/// Range the best guidance scale is expected to fall in.
pub const EXPECTED_BEST_ALPHA: (f64, f64) = (1.5, 3.5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditProtocol {
    /// Number of held-out identities `N`.
    pub identities: usize,
    /// Intensity levels applied to every single AU.
    pub levels: Vec<f64>,
    /// Number `K` of sampled two-AU combinations per identity.
    pub combos: usize,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub split: Split,
}

impl Default for EditProtocol {
    fn default() -> Self {
        Self {
            identities: 5,
            levels: vec![-4.0, -2.0, 1.0, 2.0, 4.0],
            combos: 20,
            seed: 0,
            sampler: SamplerKind::Ddim,
            steps: 50,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEdit {
    /// AU label for single-AU edits.
    pub au: Option<String>,
    pub delta: AuDelta,
    /// Offset of this edit within an identity's grid; also selects its
    /// sampling seed.
    pub slot: usize,
}

impl EditProtocol {
    pub fn edits_per_identity(&self) -> usize {
        NUM_AUS * self.levels.len() + self.combos
    }

    /// The per-identity edit list: every AU at every level, then `K`
    /// seeded pairs of distinct AUs with independently drawn levels.
    pub fn grid(&self) -> Vec<GridEdit> {
        let mut out = Vec::with_capacity(self.edits_per_identity());
        for au in 0..NUM_AUS {
            for &level in &self.levels {
                out.push(GridEdit {
                    au: Some(label(au)),
                    delta: AuDelta::single(au, level),
                    slot: out.len(),
                });
            }
        }
        let mut r = rng::seeded(rng::derive_seed(self.seed, 0xC0));
        for _ in 0..self.combos {
            let pick = sample_indices(&mut r, NUM_AUS, 2);
            let mut v = [0.0; NUM_AUS];
            for i in pick.iter() {
                v[i] = self.levels[r.random_range(0..self.levels.len())];
            }
            out.push(GridEdit {
                au: None,
                delta: AuDelta::new(v).expect("finite levels"),
                slot: out.len(),
            });
        }
        out
    }

    fn edit_seed(&self, identity_id: u32, slot: usize) -> u64 {
        rng::derive_seed(rng::derive_seed(self.seed, identity_id as u64), slot as u64)
    }
}

/// One identity image per held-out identity (the first pair of each, in
/// identity order), annotated from its provenance.
pub fn protocol_sources(manifest: &Manifest, protocol: &EditProtocol) -> Result<Vec<SceneImage>> {
    let mut seen = BTreeMap::new();
    for rec in manifest.records_in(protocol.split) {
        seen.entry(rec.identity_id).or_insert(rec);
    }
    if seen.len() < protocol.identities || protocol.identities == 0 {
        return Err(Error::InsufficientData(format!(
            "protocol needs {} identities, the {:?} split has {}",
            protocol.identities,
            protocol.split,
            seen.len()
        )));
    }
    seen.values()
        .take(protocol.identities)
        .map(|rec| manifest.load_scene_image(&rec.identity_image, &rec.identity_scene))
        .collect()
}

/// An edit model together with the provenance of its checkpoint file.
pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub model: EditModel,
    pub hash: String,
    pub summary: Option<TrainSummary>,
}

impl LoadedCheckpoint {
    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
        }
        let (model, ckpt) = EditModel::load(path, &Device::Cpu)?;
        Ok(Self {
            path: path.to_path_buf(),
            model,
            hash: file_hash(path)?,
            summary: summary_of(&ckpt),
        })
    }

    /// Whether the model was trained with AU dropout, which guidance needs.
    pub fn supports_guidance(&self) -> bool {
        self.summary.as_ref().is_none_or(|s| s.dropout_prob > 0.0)
    }

    /// `alpha` if the model supports guidance, plain conditional sampling
    /// otherwise.
    pub fn operating_guidance(&self, alpha: f64) -> GuidanceConfig {
        if self.supports_guidance() {
            GuidanceConfig { alpha, enabled: true }
        } else {
            GuidanceConfig::disabled()
        }
    }

    pub fn variant_label(&self) -> String {
        let c = &self.model.config;
        let dropout = self.summary.as_ref().map(|s| s.dropout_prob).unwrap_or(f64::NAN);
        format!("{}/{} dropout={dropout}", c.au_encoder.name(), c.id_variant.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub identity_id: u32,
    pub au: Option<String>,
    pub delta: String,
    pub seed: u64,
    pub au_se: f64,
    /// Absolute error on the edited AU (single-AU edits only).
    pub edited_au_error: Option<f64>,
    pub id_l2: f64,
    pub background_rmse: f64,
    pub background_fully_masked: bool,
    pub pose_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerAuRow {
    pub au: String,
    pub n: usize,
    pub au_mse: f64,
    pub edited_au_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub au_mse: f64,
    pub id_l2: f64,
    pub background_rmse: f64,
    pub pose_rmse: f64,
    pub n: usize,
    pub checkpoint_hash: String,
    pub alpha: f64,
    pub guidance_enabled: bool,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub protocol: EditProtocol,
    pub fully_masked: usize,
    pub per_au: Vec<PerAuRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Aggregates per-edit records; every metric is the plain mean.
    pub fn from_records(records: &[EditRecord], ckpt_hash: &str, guidance: GuidanceConfig, protocol: &EditProtocol) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("no edits to aggregate".into()));
        }
        let per_au = (0..NUM_AUS)
            .map(|i| {
                let name = label(i);
                let rows: Vec<&EditRecord> = records.iter().filter(|r| r.au.as_deref() == Some(name.as_str())).collect();
                PerAuRow {
                    n: rows.len(),
                    au_mse: mean(rows.iter().map(|r| r.au_se)),
                    edited_au_mae: mean(rows.iter().filter_map(|r| r.edited_au_error)),
                    au: name,
                }
            })
            .collect();
        Ok(Self {
            au_mse: mean(records.iter().map(|r| r.au_se)),
            id_l2: mean(records.iter().map(|r| r.id_l2)),
            background_rmse: mean(records.iter().map(|r| r.background_rmse)),
            pose_rmse: mean(records.iter().map(|r| r.pose_rmse)),
            n: records.len(),
            checkpoint_hash: ckpt_hash.to_string(),
            alpha: guidance.alpha,
            guidance_enabled: guidance.enabled,
            sampler: protocol.sampler,
            steps: protocol.steps,
            protocol: protocol.clone(),
            fully_masked: records.iter().filter(|r| r.background_fully_masked).count(),
            per_au,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let guidance = if self.guidance_enabled {
            format!("alpha {}", self.alpha)
        } else {
            "guidance off".to_string()
        };
        let _ = writeln!(s, "checkpoint {} | {guidance} | {:?} {} steps | n = {}", short(&self.checkpoint_hash), self.sampler, self.steps, self.n);
        let _ = writeln!(s, "{:<10} {:>10}", "metric", "value");
        for (k, v) in [
            ("AU MSE", self.au_mse),
            ("ID L2", self.id_l2),
            ("BG RMSE", self.background_rmse),
            ("Pose RMSE", self.pose_rmse),
        ] {
            let _ = writeln!(s, "{k:<10} {v:>10.4}");
        }
        let _ = writeln!(s, "\n{:<6} {:>4} {:>9} {:>11}", "AU", "n", "AU MSE", "edited MAE");
        for r in &self.per_au {
            let _ = writeln!(s, "{:<6} {:>4} {:>9.4} {:>11.4}", r.au, r.n, r.au_mse, r.edited_au_mae);
        }
        if self.fully_masked > 0 {
            let _ = writeln!(s, "warning: {} edits had a fully masked background", self.fully_masked);
        }
        s
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Edits every source over the protocol grid and scores the results.
pub fn run_suite(
    ckpt: &LoadedCheckpoint,
    sources: &[SceneImage],
    estimator: &Estimator,
    protocol: &EditProtocol,
    guidance: GuidanceConfig,
) -> Result<(EvalReport, Vec<EditRecord>)> {
    let grid = protocol.grid();
    let options = SampleOptions {
        guidance,
        sampler: protocol.sampler,
        steps: protocol.steps,
        clip_denoised: true,
    };
    let mut records = Vec::with_capacity(grid.len() * sources.len());
    for src in sources {
        let id = src.provenance.as_ref().map(|p| p.identity.identity_id).unwrap_or(0);
        let src_est = estimator.estimate(src)?;
        let reqs: Vec<EditRequest> = grid
            .iter()
            .map(|g| EditRequest {
                identity_image: src.clone(),
                au_delta: g.delta,
                options,
                seed: protocol.edit_seed(id, g.slot),
            })
            .collect();
        let edited = edit_batch(&ckpt.model, Some(estimator), &reqs)?;
        let refs: Vec<&SceneImage> = edited.iter().collect();
        let ests = estimator.estimate_batch(&refs)?;
        for ((g, req), (img, est)) in grid.iter().zip(&reqs).zip(edited.iter().zip(&ests)) {
            records.push(score(id, g, req, src, &src_est, img, est)?);
        }
    }
    let report = EvalReport::from_records(&records, &ckpt.hash, guidance, protocol)?;
    Ok((report, records))
}

fn score(
    identity_id: u32,
    g: &GridEdit,
    req: &EditRequest,
    src: &SceneImage,
    src_est: &EstimateReport,
    edited: &SceneImage,
    est: &EstimateReport,
) -> Result<EditRecord> {
    let target = src_est.aus.apply(&g.delta);
    let bg = background_rmse(edited, src)?;
    let edited_au_error = g.au.as_ref().map(|_| {
        let i = (0..NUM_AUS).find(|&i| g.delta.get(i) != 0.0).expect("single-AU edit");
        (est.aus.get(i) - target.get(i)).abs()
    });
    Ok(EditRecord {
        identity_id,
        au: g.au.clone(),
        delta: g.delta.to_delta_string(),
        seed: req.seed,
        au_se: au_squared_error(&est.aus, &target),
        edited_au_error,
        id_l2: embedding_l2(&est.id_embedding, &src_est.id_embedding),
        background_rmse: bg.value,
        background_fully_masked: bg.fully_masked,
        pose_rmse: pose_rmse_of(&est.pose, &src_est.pose, src.size),
    })
}

/// Writes `<stem>.jsonl` (one line per edit, then a summary line) and
/// `<stem>.txt`.
pub fn write_report(dir: &Path, stem: &str, report: &EvalReport, records: &[EditRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(&serde_json::json!({ "edit": r }))?);
        lines.push('\n');
    }
    lines.push_str(&serde_json::to_string(&serde_json::json!({ "summary": report }))?);
    lines.push('\n');
    let jsonl = dir.join(format!("{stem}.jsonl"));
    std::fs::write(&jsonl, lines).map_err(|e| Error::io(&jsonl, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<EvalReport>,
    /// `false` for checkpoints trained without AU dropout; `rows` then holds
    /// a single unguided report.
    pub guidance_supported: bool,
    pub best_alpha: Option<f64>,
    pub best_in_expected_range: Option<bool>,
    /// AU MSE at the largest alpha divided by the best AU MSE.
    pub high_alpha_ratio: Option<f64>,
}

impl SweepReport {
    pub fn at(&self, alpha: f64) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.guidance_enabled && r.alpha == alpha)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if !self.guidance_supported {
            let _ = writeln!(s, "guidance unsupported (checkpoint trained without AU dropout)");
        }
        let _ = writeln!(s, "{:>6} {:>9} {:>8} {:>8} {:>9}", "alpha", "AU MSE", "ID L2", "BG RMSE", "Pose RMSE");
        for r in &self.rows {
            let a = if r.guidance_enabled { format!("{}", r.alpha) } else { "off".into() };
            let _ = writeln!(s, "{a:>6} {:>9.4} {:>8.4} {:>8.4} {:>9.4}", r.au_mse, r.id_l2, r.background_rmse, r.pose_rmse);
        }
        if let Some(b) = self.best_alpha {
            let _ = writeln!(s, "best alpha {b} (expected range {:?}: {})", EXPECTED_BEST_ALPHA, self.best_in_expected_range == Some(true));
        }
        if let Some(r) = self.high_alpha_ratio {
            let _ = writeln!(s, "AU MSE at the largest alpha is {r:.2}x the best");
        }
        s
    }
}

pub fn guidance_sweep(
    ckpt: &LoadedCheckpoint,
    sources: &[SceneImage],
    estimator: &Estimator,
    protocol: &EditProtocol,
    alphas: &[f64],
) -> Result<SweepReport> {
    if !ckpt.supports_guidance() {
        let (r, _) = run_suite(ckpt, sources, estimator, protocol, GuidanceConfig::disabled())?;
        return Ok(SweepReport {
            rows: vec![r],
            guidance_supported: false,
            best_alpha: None,
            best_in_expected_range: None,
            high_alpha_ratio: None,
        });
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let (r, _) = run_suite(ckpt, sources, estimator, protocol, GuidanceConfig { alpha, enabled: true })?;
        tracing::info!(alpha, au_mse = r.au_mse, "sweep");
        rows.push(r);
    }
    let best = rows.iter().min_by(|a, b| a.au_mse.total_cmp(&b.au_mse));
    let best_alpha = best.map(|r| r.alpha);
    let high = rows.iter().max_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let high_alpha_ratio = match (best, high) {
        (Some(b), Some(h)) if b.au_mse > 0.0 => Some(h.au_mse / b.au_mse),
        _ => None,
    };
    Ok(SweepReport {
        rows,
        guidance_supported: true,
        best_alpha,
        best_in_expected_range: best_alpha.map(|a| (EXPECTED_BEST_ALPHA.0..=EXPECTED_BEST_ALPHA.1).contains(&a)),
        high_alpha_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>9} {:>8} {:>8} {:>9}", "variant", "AU MSE", "ID L2", "BG RMSE", "Pose RMSE");
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(s, "{:<40} {:>9.4} {:>8.4} {:>8.4} {:>9.4}", r.variant, m.au_mse, m.id_l2, m.background_rmse, m.pose_rmse);
        }
        s
    }
}

/// Evaluates each checkpoint on the same grid at its operating guidance.
pub fn ablation_report(
    ckpts: &[LoadedCheckpoint],
    sources: &[SceneImage],
    estimator: &Estimator,
    protocol: &EditProtocol,
    alpha: f64,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(ckpts.len());
    for c in ckpts {
        let (report, _) = run_suite(c, sources, estimator, protocol, c.operating_guidance(alpha))?;
        rows.push(AblationRow {
            variant: c.variant_label(),
            checkpoint: c.path.clone(),
            report,
        });
    }
    Ok(AblationReport { rows })
}

/// Estimated intensity of AU `au` after editing each source by each level
/// (one row per source).
pub fn au_response(
    ckpt: &LoadedCheckpoint,
    sources: &[SceneImage],
    estimator: &Estimator,
    au: usize,
    levels: &[f64],
    options: SampleOptions,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sources.len());
    for (k, src) in sources.iter().enumerate() {
        let reqs: Vec<EditRequest> = levels
            .iter()
            .map(|&l| EditRequest {
                identity_image: src.clone(),
                au_delta: AuDelta::single(au, l),
                options,
                seed: rng::derive_seed(seed, k as u64),
            })
            .collect();
        let edited = edit_batch(&ckpt.model, Some(estimator), &reqs)?;
        let refs: Vec<&SceneImage> = edited.iter().collect();
        out.push(estimator.estimate_batch(&refs)?.iter().map(|e| e.aus.get(au)).collect());
    }
    Ok(out)
}

/// Number of pairs `i < j` with `values[i] > values[j]`.
pub fn count_inversions(values: &[f64]) -> usize {
    let mut n = 0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if values[i] > values[j] {
                n += 1;
            }
        }
    }
    n
}
