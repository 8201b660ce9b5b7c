//! Joint training of denoiser, ID encoder, Attribute Controller and AU
//! encoder, with checkpointing and bit-exact resume.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use super::data::PairData;
use super::dropout::{au_dropout, DropoutConfig};
use crate::au::AuDelta;
use crate::checkpoint::{config_hash, Checkpoint};
use crate::diffcore::layers::{mse, mse_per_sample};
use crate::diffcore::{ConditionBundle, EditModel, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::{self, RngState, SeededRng};
use crate::synthface::{Manifest, Split};

pub const STATE_FILE: &str = "train_state.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
const LOSS_HISTORY: usize = 100;
const VAL_STREAM: u64 = 0x7661_6c;
const LABEL_NOISE_STREAM: u64 = 0x6e6f_6973;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub dropout: DropoutConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Standard deviation of the label noise added to oracle AUs; `None`
    /// trains on exact labels.
    pub label_noise_sigma: Option<f64>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Number of validation pairs used for the validation loss.
    pub val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            optimizer: AdamWConfig::default(),
            dropout: DropoutConfig::default(),
            batch_size: 16,
            steps: 20_000,
            seed: 0,
            label_noise_sigma: None,
            checkpoint_every: 500,
            log_every: 50,
            val_pairs: 64,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.dropout;
        if !(0.0..=1.0).contains(&d.prob) {
            return Err(Error::validation("dropout.prob", "must be in [0, 1]"));
        }
        if d.zero_sigma < 0.0 || !d.zero_mu.is_finite() {
            return Err(Error::validation("dropout.zero_sigma", "must be non-negative"));
        }
        if self.optimizer.lr < 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::validation("optimizer.lr", "must be a non-negative number"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::validation("steps", "batch_size and steps must be positive"));
        }
        Ok(())
    }

    /// Hash of everything that affects the trajectory. The step budget is
    /// excluded so a finished run can be extended.
    pub fn resume_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        c.log_every = 0;
        config_hash(&c)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    rng: RngState,
    loss_history: Vec<f64>,
    train_config: TrainConfig,
    resume_hash: String,
    elapsed: f64,
}

/// Summary stored in the final model checkpoint's metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub val_loss: f64,
    pub final_train_loss: f64,
    pub dropout_prob: f64,
    pub train_config: TrainConfig,
    pub train_pairs: usize,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub timesteps: Vec<usize>,
}

/// One training batch after sampling and dropout.
pub struct Batch {
    pub identity: Tensor,
    pub target: Tensor,
    pub condition: Tensor,
    pub deltas: Vec<AuDelta>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

/// Noise-prediction loss of one batch: `mean ||eps - eps_hat(z_t, t, ...)||^2`.
pub fn batch_loss(model: &EditModel, b: &Batch) -> Result<Tensor> {
    let z_t = model.schedule.forward_diffuse(&b.target, &b.timesteps, &b.noise)?;
    let id = model.id_encode(&b.identity)?;
    let au = model.au_encode(&model.delta_tensor(&b.deltas)?)?;
    let bundle = ConditionBundle {
        au: Some(&au),
        cond_latent: Some(&b.condition),
        id: Some(&id),
    };
    let eps = model.denoise_step(&z_t, &b.timesteps, bundle)?;
    Ok(mse(&eps, &b.noise)?)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: EditModel,
    pub opt: AdamW,
    pub rng: SeededRng,
    pub step: u64,
    pub loss_history: VecDeque<f64>,
    elapsed_before: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = EditModel::new(cfg.model.clone(), dtype, device)?;
        let opt = AdamW::new(&model.vars, cfg.optimizer)?;
        Ok(Self {
            rng: rng::seeded(cfg.seed),
            cfg,
            model,
            opt,
            step: 0,
            loss_history: VecDeque::new(),
            elapsed_before: 0.0,
        })
    }

    /// Draws a batch: pair indices, timesteps, noise, then per item a
    /// dropout draw and (if needed) the zero-delta perturbation.
    pub fn sample_batch(&mut self, data: &PairData) -> Result<Batch> {
        let bs = self.cfg.batch_size;
        let n = data.len();
        if n == 0 {
            return Err(Error::InsufficientData("training set is empty".into()));
        }
        let idx: Vec<usize> = (0..bs).map(|_| self.rng.random_range(0..n)).collect();
        let t_max = self.model.schedule.len();
        let timesteps: Vec<usize> = (0..bs).map(|_| self.rng.random_range(0..t_max)).collect();
        let (s, z, g) = data.latents(&self.model, &idx)?;
        let noise = Tensor::from_vec(rng::normal_vec(&mut self.rng, z.elem_count()), z.dims(), z.device())?.to_dtype(z.dtype())?;
        let deltas = idx
            .iter()
            .map(|&i| {
                let u: f64 = self.rng.random();
                au_dropout(&data.deltas[i], u, &self.cfg.dropout, &mut self.rng)
            })
            .collect();
        Ok(Batch {
            identity: s,
            target: z,
            condition: g,
            deltas,
            timesteps,
            noise,
        })
    }

    pub fn training_step(&mut self, data: &PairData) -> Result<StepStats> {
        let batch = self.sample_batch(data)?;
        let loss = batch_loss(&self.model, &batch)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            let history: Vec<String> = self.loss_history.iter().map(|l| format!("{l:.4}")).collect();
            return Err(Error::NonFinite(format!(
                "loss {loss_value} at step {}; timesteps {:?}; recent losses [{}]",
                self.step + 1,
                batch.timesteps,
                history.join(", ")
            )));
        }
        let grads = loss.backward()?;
        let grad_norm = self.opt.step(&grads)?;
        self.step += 1;
        self.loss_history.push_back(loss_value);
        while self.loss_history.len() > LOSS_HISTORY {
            self.loss_history.pop_front();
        }
        Ok(StepStats {
            loss: loss_value,
            grad_norm,
            timesteps: batch.timesteps,
        })
    }

    pub fn save_state(&self, path: &Path, elapsed: f64) -> Result<()> {
        let mut c = self.model.to_checkpoint()?;
        self.opt.save_into(&mut c)?;
        c.meta = serde_json::to_value(StateMeta {
            step: self.step,
            rng: RngState::capture(&self.rng),
            loss_history: self.loss_history.iter().copied().collect(),
            train_config: self.cfg.clone(),
            resume_hash: self.cfg.resume_hash()?,
            elapsed,
        })?;
        c.save(path)
    }

    /// Restores a trainer from a state checkpoint. The stored configuration
    /// must match `cfg` apart from the step budget.
    pub fn resume(cfg: TrainConfig, path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let meta: StateMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: not a training state: {e}", path.display())))?;
        let want = cfg.resume_hash()?;
        if meta.resume_hash != want {
            return Err(Error::Checkpoint(format!(
                "{}: config hash {} does not match current config {want}",
                path.display(),
                meta.resume_hash
            )));
        }
        let mut t = Self::new(cfg, dtype, device)?;
        ckpt.load_varmap("", &t.model.vars)?;
        t.opt.load_from(&ckpt, meta.step)?;
        t.rng = meta.rng.restore();
        t.step = meta.step;
        t.loss_history = meta.loss_history.into();
        t.elapsed_before = meta.elapsed;
        Ok(t)
    }
}

/// Mean noise-prediction loss over `data` with fixed timesteps and noise
/// (derived from `seed`) and exact deltas.
pub fn validation_loss(model: &EditModel, data: &PairData, batch_size: usize, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("validation set is empty".into()));
    }
    let mut r = rng::seeded(rng::derive_seed(seed, VAL_STREAM));
    let t_max = model.schedule.len();
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (s, z, g) = data.latents(model, chunk)?;
        let timesteps: Vec<usize> = chunk.iter().map(|_| r.random_range(0..t_max)).collect();
        let noise = Tensor::from_vec(rng::normal_vec(&mut r, z.elem_count()), z.dims(), z.device())?.to_dtype(z.dtype())?;
        let batch = Batch {
            identity: s,
            target: z,
            condition: g,
            deltas: chunk.iter().map(|&i| data.deltas[i]).collect(),
            timesteps,
            noise,
        };
        let z_t = model.schedule.forward_diffuse(&batch.target, &batch.timesteps, &batch.noise)?;
        let id = model.id_encode(&batch.identity)?;
        let au = model.au_encode(&model.delta_tensor(&batch.deltas)?)?;
        let eps = model.denoise_step(
            &z_t,
            &batch.timesteps,
            ConditionBundle {
                au: Some(&au),
                cond_latent: Some(&batch.condition),
                id: Some(&id),
            },
        )?;
        let per = mse_per_sample(&eps, &batch.noise)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        total += per.iter().sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub summary: TrainSummary,
}

fn truncate_log(path: &Path, upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<String> = std::io::BufReader::new(f)
        .lines()
        .map_while(|l| l.ok())
        .filter(|l| serde_json::from_str::<LogRecord>(l).map(|r| r.step <= upto).unwrap_or(false))
        .collect();
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads the train and validation pairs of a manifest, applying label noise
/// if configured.
pub fn load_training_data(manifest: &Manifest, cfg: &TrainConfig) -> Result<(PairData, PairData)> {
    let mut train = PairData::load(manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::InsufficientData("manifest has no training pairs".into()));
    }
    if let Some(sigma) = cfg.label_noise_sigma {
        train.apply_label_noise(sigma, rng::derive_seed(cfg.seed, LABEL_NOISE_STREAM));
    }
    let mut val = PairData::load(manifest, Split::Val)?;
    if val.is_empty() {
        val = PairData::load(manifest, Split::Test)?;
    }
    val.truncate(cfg.val_pairs);
    Ok((train, val))
}

/// Trains (or resumes training) into `out`. An existing state file in
/// `out` is resumed; its config must match.
pub fn train(manifest: &Manifest, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    let (train_data, val_data) = load_training_data(manifest, cfg)?;
    train_on(&train_data, &val_data, cfg, out)
}

pub fn train_on(train_data: &PairData, val_data: &PairData, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let device = Device::Cpu;
    let state_path = out.join(STATE_FILE);
    let log_path = out.join(LOG_FILE);
    let mut trainer = if state_path.exists() {
        let t = Trainer::resume(cfg.clone(), &state_path, DType::F32, &device)?;
        tracing::info!(step = t.step, "resuming training");
        truncate_log(&log_path, t.step)?;
        t
    } else {
        if log_path.exists() {
            std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
        Trainer::new(cfg.clone(), DType::F32, &device)?
    };
    let started = Instant::now();
    let elapsed = |t: &Trainer| t.elapsed_before + started.elapsed().as_secs_f64();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    while trainer.step < cfg.steps {
        let stats = trainer.training_step(train_data)?;
        let step = trainer.step;
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let rec = LogRecord {
                step,
                loss: stats.loss,
                lr: cfg.optimizer.lr,
                grad_norm: stats.grad_norm,
                wallclock: elapsed(&trainer),
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
            tracing::info!(step, loss = stats.loss, "train");
        }
        if step % cfg.checkpoint_every.max(1) == 0 || step == cfg.steps {
            trainer.save_state(&state_path, elapsed(&trainer))?;
        }
    }
    let val_loss = if val_data.is_empty() {
        f64::NAN
    } else {
        validation_loss(&trainer.model, val_data, cfg.batch_size, cfg.seed)?
    };
    let summary = TrainSummary {
        steps: trainer.step,
        val_loss,
        final_train_loss: trainer.loss_history.back().copied().unwrap_or(f64::NAN),
        dropout_prob: cfg.dropout.prob,
        train_config: cfg.clone(),
        train_pairs: train_data.len(),
        elapsed_seconds: elapsed(&trainer),
    };
    let mut ckpt = trainer.model.to_checkpoint()?;
    ckpt.meta = serde_json::to_value(&summary)?;
    let model_path = out.join(MODEL_FILE);
    ckpt.save(&model_path)?;
    Ok(TrainOutcome { model_path, summary })
}

/// Training summary stored in a model checkpoint, if present.
pub fn summary_of(ckpt: &Checkpoint) -> Option<TrainSummary> {
    serde_json::from_value(ckpt.meta.clone()).ok()
}
