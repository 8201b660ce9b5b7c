//! Edit jobs and their append-only JSON-lines store.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use facelab::estimators::EstimateReport;
use facelab::sampler::SamplerKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }

    /// Only queued → running → {done, failed}, plus queued → failed.
    pub fn can_move_to(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (Self::Queued, Self::Running) | (Self::Queued, Self::Failed) | (Self::Running, Self::Done) | (Self::Running, Self::Failed)
        )
    }
}

/// The request as accepted, without the image bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    /// Normalised delta string.
    pub delta: String,
    pub au_delta: Vec<f64>,
    pub alpha: f64,
    pub guidance: bool,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seed: u64,
    /// SHA-256 of the PNG that was edited (after any downscale).
    pub image_sha256: String,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub image_png_base64: String,
    pub estimate: EstimateReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub created_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub job_id: String,
    pub status: JobStatus,
    pub request: JobRequest,
    pub result: Option<JobResult>,
    pub error: Option<String>,
    pub timings: Timings,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredJob {
    job: EditJob,
    /// Base64 PNG input, kept until the job is terminal so queued jobs can be
    /// resumed after a restart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<String>,
}

/// In-memory job table mirrored to a JSON-lines file. Each update appends
/// the full record; the last line for a job wins on reload.
pub struct JobStore {
    path: PathBuf,
    ttl: Duration,
    jobs: Mutex<HashMap<String, StoredJob>>,
    file: Mutex<File>,
}

impl JobStore {
    /// Loads `path` (if present), drops jobs past their TTL, compacts the
    /// file and marks jobs interrupted while running as failed.
    pub fn open(path: &Path, ttl: Duration) -> Result<Self> {
        let mut jobs: HashMap<String, StoredJob> = HashMap::new();
        if path.exists() {
            let f = File::open(path).with_context(|| format!("opening job store {}", path.display()))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<StoredJob>(&line) {
                    Ok(s) => {
                        jobs.insert(s.job.job_id.clone(), s);
                    }
                    // a torn final line from a crash is skipped
                    Err(e) => tracing::warn!(line = n + 1, error = %e, "skipping unreadable job record"),
                }
            }
        }
        let cutoff = now() - ttl.as_secs_f64();
        jobs.retain(|_, s| s.job.timings.finished_at.unwrap_or(s.job.timings.created_at) >= cutoff);
        for s in jobs.values_mut() {
            if s.job.status == JobStatus::Running {
                s.job.status = JobStatus::Failed;
                s.job.error = Some("interrupted by a service restart".into());
                s.job.timings.finished_at = Some(now());
                s.input = None;
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).ok();
        }
        let tmp = path.with_extension("compact");
        {
            let mut f = File::create(&tmp)?;
            let mut ids: Vec<&String> = jobs.keys().collect();
            ids.sort();
            for id in ids {
                writeln!(f, "{}", serde_json::to_string(&jobs[id])?)?;
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            ttl,
            jobs: Mutex::new(jobs),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn persist(&self, s: &StoredJob) -> Result<()> {
        let line = serde_json::to_string(s)?;
        let mut f = self.file.lock().expect("store file lock");
        writeln!(f, "{line}")?;
        f.flush()?;
        Ok(())
    }

    pub fn insert(&self, job: EditJob, input_png_base64: String) -> Result<()> {
        let s = StoredJob {
            job,
            input: Some(input_png_base64),
        };
        let mut jobs = self.jobs.lock().expect("job table lock");
        self.persist(&s)?;
        jobs.insert(s.job.job_id.clone(), s);
        Ok(())
    }

    fn expired(&self, j: &EditJob) -> bool {
        j.timings.finished_at.unwrap_or(j.timings.created_at) < now() - self.ttl.as_secs_f64()
    }

    pub fn get(&self, id: &str) -> Option<EditJob> {
        let jobs = self.jobs.lock().expect("job table lock");
        jobs.get(id).map(|s| s.job.clone()).filter(|j| !self.expired(j))
    }

    pub fn input(&self, id: &str) -> Option<String> {
        self.jobs.lock().expect("job table lock").get(id).and_then(|s| s.input.clone())
    }

    /// Ids of jobs still waiting to run, oldest first.
    pub fn queued(&self) -> Vec<String> {
        let jobs = self.jobs.lock().expect("job table lock");
        let mut q: Vec<&EditJob> = jobs.values().map(|s| &s.job).filter(|j| j.status == JobStatus::Queued).collect();
        q.sort_by(|a, b| a.timings.created_at.total_cmp(&b.timings.created_at).then(a.job_id.cmp(&b.job_id)));
        q.into_iter().map(|j| j.job_id.clone()).collect()
    }

    /// Applies `update` to a job and persists it. Fails on unknown ids and
    /// on backward status moves.
    pub fn update(&self, id: &str, update: impl FnOnce(&mut EditJob)) -> Result<EditJob> {
        let mut jobs = self.jobs.lock().expect("job table lock");
        let Some(s) = jobs.get_mut(id) else {
            bail!("unknown job {id}");
        };
        let before = s.job.status;
        let mut next = s.job.clone();
        update(&mut next);
        if next.status != before && !before.can_move_to(next.status) {
            bail!("job {id}: illegal status change {before:?} -> {:?}", next.status);
        }
        if next.status == JobStatus::Done && next.result.is_none() {
            bail!("job {id}: done without a result");
        }
        s.job = next;
        if s.job.status.is_terminal() {
            s.input = None;
        }
        self.persist(s)?;
        Ok(s.job.clone())
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().expect("job table lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str) -> EditJob {
        EditJob {
            job_id: id.into(),
            status: JobStatus::Queued,
            request: JobRequest {
                delta: "AU12=+3".into(),
                au_delta: vec![0.0; 12],
                alpha: 3.0,
                guidance: true,
                sampler: SamplerKind::Ddim,
                steps: 50,
                seed: 1,
                image_sha256: "00".into(),
                image_size: 64,
            },
            result: None,
            error: None,
            timings: Timings {
                created_at: now(),
                ..Timings::default()
            },
        }
    }

    #[test]
    fn status_moves_forward_only() {
        use JobStatus::*;
        assert!(Queued.can_move_to(Running));
        assert!(Running.can_move_to(Failed));
        assert!(!Done.can_move_to(Running));
        assert!(!Running.can_move_to(Queued));
        assert!(!Queued.can_move_to(Done));
    }

    #[test]
    fn store_survives_reopen_and_rejects_bad_moves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.jsonl");
        let ttl = Duration::from_secs(3600);
        {
            let s = JobStore::open(&path, ttl).unwrap();
            s.insert(job("a"), "aW1n".into()).unwrap();
            s.insert(job("b"), "aW1n".into()).unwrap();
            s.insert(job("c"), "aW1n".into()).unwrap();
            s.update("a", |j| j.status = JobStatus::Running).unwrap();
            assert!(s.update("a", |j| j.status = JobStatus::Done).is_err(), "done needs a result");
            s.update("a", |j| {
                j.status = JobStatus::Failed;
                j.error = Some("x".into());
            })
            .unwrap();
            assert!(s.update("a", |j| j.status = JobStatus::Running).is_err());
            s.update("b", |j| j.status = JobStatus::Running).unwrap();
        }
        let s = JobStore::open(&path, ttl).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get("a").unwrap().status, JobStatus::Failed);
        assert_eq!(s.get("b").unwrap().status, JobStatus::Failed, "running jobs are failed on restart");
        assert_eq!(s.queued(), vec!["c".to_string()]);
        assert_eq!(s.input("c").as_deref(), Some("aW1n"));
        assert!(s.input("a").is_none());
    }

    #[test]
    fn expired_jobs_are_evicted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.jsonl");
        let s = JobStore::open(&path, Duration::from_secs(3600)).unwrap();
        let mut old = job("old");
        old.timings.created_at -= 7200.0;
        s.insert(old, String::new()).unwrap();
        s.insert(job("new"), String::new()).unwrap();
        assert!(s.get("old").is_none());
        drop(s);
        let s = JobStore::open(&path, Duration::from_secs(3600)).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.get("new").is_some());
    }
}
