//! Loaded model, estimator, job store and the worker pool that runs edits.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use facelab::au::{AU_CODES, AU_NAMES, NUM_AUS};
use facelab::checkpoint::{file_hash, sha256_hex};
use facelab::diffcore::{EditModel, ModelConfig};
use facelab::estimators::{Estimator, Regressor, RegressorMetrics};
use facelab::sampler::{edit_image, EditRequest, GuidanceConfig, SampleOptions};
use facelab::synthface::SceneImage;
use facelab::trainer::{summary_of, TrainSummary};
use serde::{Deserialize, Serialize};

use crate::jobs::{now, EditJob, JobRequest, JobResult, JobStatus, JobStore, Timings};

/// Uploaded images may be at most this many times the model resolution.
pub const MAX_UPSCALE_FACTOR: usize = 4;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model_path: PathBuf,
    /// Regressor checkpoint; without one only rendered images with
    /// provenance could be handled, which uploads never have.
    pub estimator_path: Option<PathBuf>,
    pub workers: usize,
    pub store_path: PathBuf,
    pub job_ttl: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuInfo {
    pub index: usize,
    pub code: u32,
    pub label: String,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorCard {
    pub kind: String,
    pub path: Option<PathBuf>,
    pub metrics: Option<RegressorMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCard {
    pub checkpoint_path: PathBuf,
    pub checkpoint_hash: String,
    pub config: ModelConfig,
    pub image_size: usize,
    pub aus: Vec<AuInfo>,
    pub training: Option<TrainSummary>,
    pub estimator: EstimatorCard,
}

/// Client-facing error classes.
#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

pub struct Service {
    pub model: Arc<EditModel>,
    pub estimator: Arc<Estimator>,
    pub card: ModelCard,
    pub jobs: Arc<JobStore>,
    queue: Mutex<Sender<String>>,
}

/// Accepted edit parameters, validated.
#[derive(Debug, Clone)]
pub struct EditParams {
    pub image: SceneImage,
    pub request: JobRequest,
}

impl Service {
    /// Loads everything and starts `config.workers` worker threads. Jobs
    /// still queued in the store are resubmitted.
    pub fn start(config: &ServiceConfig) -> Result<Arc<Self>> {
        let path = &config.model_path;
        if !path.exists() {
            return Err(anyhow!("model checkpoint {} not found", path.display()));
        }
        let (model, ckpt) = EditModel::load(path, &candle::Device::Cpu).with_context(|| format!("loading {}", path.display()))?;
        let (estimator, est_card) = match &config.estimator_path {
            Some(p) => {
                let r = Regressor::load(p, &candle::Device::Cpu).with_context(|| format!("loading estimator {}", p.display()))?;
                let card = EstimatorCard {
                    kind: "regressor".into(),
                    path: Some(p.clone()),
                    metrics: r.metrics.clone(),
                };
                (Estimator::Regressor(Box::new(r)), card)
            }
            None => (
                Estimator::Oracle,
                EstimatorCard {
                    kind: "oracle".into(),
                    path: None,
                    metrics: None,
                },
            ),
        };
        let card = ModelCard {
            checkpoint_path: path.clone(),
            checkpoint_hash: file_hash(path)?,
            image_size: model.config.image_size,
            config: model.config.clone(),
            aus: (0..NUM_AUS)
                .map(|i| AuInfo {
                    index: i,
                    code: AU_CODES[i],
                    label: facelab::au::label(i),
                    name: AU_NAMES[i].to_string(),
                })
                .collect(),
            training: summary_of(&ckpt),
            estimator: est_card,
        };
        let jobs = Arc::new(JobStore::open(&config.store_path, config.job_ttl)?);
        let (tx, rx) = channel::<String>();
        let svc = Arc::new(Self {
            model: Arc::new(model),
            estimator: Arc::new(estimator),
            card,
            jobs,
            queue: Mutex::new(tx),
        });
        let rx = Arc::new(Mutex::new(rx));
        for w in 0..config.workers.max(1) {
            let svc = Arc::clone(&svc);
            let rx = Arc::clone(&rx);
            std::thread::Builder::new()
                .name(format!("edit-worker-{w}"))
                .spawn(move || worker_loop(&svc, &rx))?;
        }
        for id in svc.jobs.queued() {
            svc.enqueue(id);
        }
        Ok(svc)
    }

    fn enqueue(&self, id: String) {
        let _ = self.queue.lock().expect("queue lock").send(id);
    }

    /// Decodes an upload and brings it to model resolution: exact size is
    /// kept, integer multiples up to [`MAX_UPSCALE_FACTOR`] are box-filtered
    /// down, anything else is rejected.
    pub fn decode_image(&self, b64: &str) -> std::result::Result<SceneImage, RequestError> {
        let bytes = B64
            .decode(b64.trim())
            .map_err(|e| RequestError::BadRequest(format!("image: invalid base64: {e}")))?;
        let img = SceneImage::decode_png(&bytes).map_err(|e| RequestError::BadRequest(format!("image: {e}")))?;
        let want = self.card.image_size;
        if img.size == want {
            return Ok(img);
        }
        if img.size > want * MAX_UPSCALE_FACTOR || img.size < want || img.size % want != 0 {
            return Err(RequestError::BadRequest(format!(
                "image: {0}x{0} not accepted; send {want}x{want} or an integer multiple up to {1}x{1}",
                img.size,
                want * MAX_UPSCALE_FACTOR
            )));
        }
        img.downscale(want).map_err(|e| RequestError::BadRequest(format!("image: {e}")))
    }

    pub fn submit(&self, params: EditParams) -> Result<EditJob> {
        let png = params.image.encode_png()?;
        let mut request = params.request;
        request.image_sha256 = sha256_hex(&png);
        request.image_size = params.image.size;
        let job = EditJob {
            job_id: uuid::Uuid::new_v4().simple().to_string(),
            status: JobStatus::Queued,
            request,
            result: None,
            error: None,
            timings: Timings {
                created_at: now(),
                ..Timings::default()
            },
        };
        self.jobs.insert(job.clone(), B64.encode(&png))?;
        self.enqueue(job.job_id.clone());
        Ok(job)
    }

    /// Blocks until the job is terminal or `timeout` passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Option<EditJob> {
        let start = std::time::Instant::now();
        loop {
            let j = self.jobs.get(id)?;
            if j.status.is_terminal() || start.elapsed() > timeout {
                return Some(j);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn run_job(&self, id: &str) -> Result<JobResult> {
        let job = self.jobs.get(id).ok_or_else(|| anyhow!("job {id} vanished"))?;
        let input = self.jobs.input(id).ok_or_else(|| anyhow!("job {id} has no stored input"))?;
        let image = SceneImage::decode_png(&B64.decode(input)?)?;
        let r = &job.request;
        let req = EditRequest {
            identity_image: image,
            au_delta: facelab::au::AuDelta::from_slice(&r.au_delta)?,
            options: SampleOptions {
                guidance: GuidanceConfig {
                    alpha: r.alpha,
                    enabled: r.guidance,
                },
                sampler: r.sampler,
                steps: r.steps,
                clip_denoised: true,
            },
            seed: r.seed,
        };
        let out = edit_image(&self.model, Some(&self.estimator), &req)?;
        let estimate = self.estimator.estimate(&out)?;
        Ok(JobResult {
            image_png_base64: B64.encode(out.encode_png()?),
            estimate,
        })
    }
}

fn worker_loop(svc: &Service, rx: &Mutex<Receiver<String>>) {
    loop {
        let next = rx.lock().expect("queue lock").recv();
        let Ok(id) = next else { return };
        let started = svc.jobs.update(&id, |j| {
            j.status = JobStatus::Running;
            j.timings.started_at = Some(now());
        });
        if started.is_err() {
            // already taken or evicted
            continue;
        }
        let outcome = svc.run_job(&id);
        let res = svc.jobs.update(&id, |j| {
            j.timings.finished_at = Some(now());
            match outcome {
                Ok(r) => {
                    j.status = JobStatus::Done;
                    j.result = Some(r);
                }
                Err(e) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(format!("{e:#}"));
                }
            }
        });
        if let Err(e) = res {
            tracing::error!(job = %id, error = %e, "could not record job outcome");
        }
    }
}

/// Store path default next to the checkpoint.
pub fn default_store_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("jobs.jsonl")
}
