use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use candle::Device;
use clap::{Args, Parser, Subcommand};
use editsvc::{router, Service, ServiceConfig};
use facelab::au::AuDelta;
use facelab::estimators::{train_regressor, Estimator, Regressor, RegressorConfig};
use facelab::evalharness::{
    ablation_report, guidance_sweep, protocol_sources, run_suite, write_report, EditProtocol, LoadedCheckpoint, SWEEP_ALPHAS,
};
use facelab::sampler::{edit_image, transfer_expression, EditRequest, GuidanceConfig, SampleOptions, SamplerKind};
use facelab::synthface::{generate_dataset, Manifest, SceneImage};
use facelab::trainer::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "facelab", about = "AU-conditioned face editing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Sampling {
    /// Guidance scale.
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    /// Disable classifier-free guidance (one denoiser call per step).
    #[arg(long)]
    no_guidance: bool,
    #[arg(long, value_enum, default_value = "ddim")]
    sampler: SamplerArg,
    /// DDIM steps (DDPM always runs every timestep).
    #[arg(long, default_value_t = 50)]
    steps: usize,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum SamplerArg {
    Ddpm,
    Ddim,
}

impl Sampling {
    fn options(&self) -> SampleOptions {
        SampleOptions {
            guidance: if self.no_guidance {
                GuidanceConfig::disabled()
            } else {
                GuidanceConfig {
                    alpha: self.alpha,
                    enabled: true,
                }
            },
            sampler: match self.sampler {
                SamplerArg::Ddpm => SamplerKind::Ddpm,
                SamplerArg::Ddim => SamplerKind::Ddim,
            },
            steps: self.steps,
            clip_denoised: true,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct Protocol {
    /// Held-out identities N.
    #[arg(long, default_value_t = 5)]
    identities: usize,
    /// Sampled AU-pair combinations K per identity.
    #[arg(long, default_value_t = 20)]
    combos: usize,
    #[arg(long, value_enum, default_value = "ddim")]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Protocol {
    fn build(&self) -> EditProtocol {
        EditProtocol {
            identities: self.identities,
            combos: self.combos,
            seed: self.seed,
            sampler: match self.sampler {
                SamplerArg::Ddpm => SamplerKind::Ddpm,
                SamplerArg::Ddim => SamplerKind::Ddim,
            },
            steps: self.steps,
            ..EditProtocol::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset.
    GenData {
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        identities: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the AU/pose/identity regressor on a dataset's train split.
    TrainEstimator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the editing model. Resumes if `out` holds a training state.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML training config; defaults are used if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Edit one image by an AU delta.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Regressor used to annotate images that carry no face mask.
        #[arg(long, env = "FACELAB_ESTIMATOR")]
        estimator: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// e.g. "AU4=-6,AU12=+2"
        #[arg(long, allow_hyphen_values = true)]
        delta: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move the driver's expression onto the source face.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "FACELAB_ESTIMATOR")]
        estimator: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        driver: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the edit grid on held-out identities and report the four metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "FACELAB_ESTIMATOR")]
        estimator: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        alpha: f64,
        #[command(flatten)]
        protocol: Protocol,
        /// Report directory.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Run the evaluation at several guidance scales.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "FACELAB_ESTIMATOR")]
        estimator: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[command(flatten)]
        protocol: Protocol,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Compare model variants on the same edit grid.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "FACELAB_ESTIMATOR")]
        estimator: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        alpha: f64,
        #[command(flatten)]
        protocol: Protocol,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = "FACELAB_MODEL")]
        ckpt: PathBuf,
        #[arg(long, env = "FACELAB_ESTIMATOR")]
        estimator: Option<PathBuf>,
        #[arg(long, env = "FACELAB_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "FACELAB_WORKERS", default_value_t = 1)]
        workers: usize,
        /// Job store file; defaults to `<ckpt>.jobs.jsonl`.
        #[arg(long, env = "FACELAB_JOB_STORE")]
        store: Option<PathBuf>,
        /// Seconds a job is kept after it finishes.
        #[arg(long, env = "FACELAB_JOB_TTL", default_value_t = 86_400)]
        job_ttl: u64,
    },
}

fn load_regressor(path: &Path) -> Result<Estimator> {
    let r = Regressor::load(path, &Device::Cpu).with_context(|| format!("loading estimator {}", path.display()))?;
    Ok(Estimator::Regressor(Box::new(r)))
}

fn load_ckpt(path: &Path) -> Result<LoadedCheckpoint> {
    LoadedCheckpoint::open(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_image(path: &Path) -> Result<SceneImage> {
    SceneImage::load_png(path).with_context(|| format!("reading image {}", path.display()))
}

fn eval_setup(data: &Path, estimator: &Path, protocol: &Protocol) -> Result<(Vec<SceneImage>, Estimator, EditProtocol)> {
    let manifest = Manifest::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let protocol = protocol.build();
    let sources = protocol_sources(&manifest, &protocol)?;
    Ok((sources, load_regressor(estimator)?, protocol))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { pairs, identities, seed, out } => {
            let m = generate_dataset(pairs, identities, seed, &out)?;
            println!("wrote {} pairs to {}", m.records.len(), out.display());
        }
        Command::TrainEstimator { data, out, epochs, seed } => {
            let manifest = Manifest::load(&data)?;
            let mut cfg = RegressorConfig {
                image_size: manifest.header.image_size,
                seed,
                ..RegressorConfig::default()
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let reg = train_regressor(&manifest, cfg)?;
            reg.save(&out)?;
            if let Some(m) = &reg.metrics {
                println!(
                    "estimator at {}: AU MAE {:.3}, pose MAE {:.2} px, triplet accuracy {}",
                    out.display(),
                    m.au_mae,
                    m.pose_offset_mae_px,
                    m.triplet_accuracy.map(|t| format!("{t:.3}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Command::Train { data, config, out, steps } => {
            let mut cfg = match config {
                Some(p) => {
                    let s = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    TrainConfig::from_toml(&s)?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let manifest = Manifest::load(&data)?;
            let outcome = trainer::train(&manifest, &cfg, &out)?;
            println!(
                "trained {} steps, validation loss {:.5}, model at {}",
                outcome.summary.steps,
                outcome.summary.val_loss,
                outcome.model_path.display()
            );
        }
        Command::Edit {
            ckpt,
            estimator,
            image,
            delta,
            seed,
            sampling,
            out,
        } => {
            let delta = AuDelta::parse(&delta)?;
            delta.check_inference_range()?;
            let ckpt = load_ckpt(&ckpt)?;
            let estimator = estimator.as_deref().map(load_regressor).transpose()?;
            let req = EditRequest {
                identity_image: load_image(&image)?,
                au_delta: delta,
                options: sampling.options(),
                seed,
            };
            let img = edit_image(&ckpt.model, estimator.as_ref(), &req)?;
            img.save_png(&out)?;
            println!("wrote {} ({})", out.display(), delta.to_delta_string());
        }
        Command::Transfer {
            ckpt,
            estimator,
            source,
            driver,
            seed,
            sampling,
            out,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let est = load_regressor(&estimator)?;
            let (img, delta) = transfer_expression(&ckpt.model, &est, &load_image(&source)?, &load_image(&driver)?, sampling.options(), seed)?;
            img.save_png(&out)?;
            println!("wrote {} (delta {})", out.display(), delta.to_delta_string());
        }
        Command::Eval {
            ckpt,
            data,
            estimator,
            alpha,
            protocol,
            out,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let (sources, est, protocol) = eval_setup(&data, &estimator, &protocol)?;
            let (report, records) = run_suite(&ckpt, &sources, &est, &protocol, ckpt.operating_guidance(alpha))?;
            write_report(&out, "eval", &report, &records)?;
            print!("{}", report.to_table());
        }
        Command::Sweep {
            ckpt,
            data,
            estimator,
            alphas,
            protocol,
            out,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let (sources, est, protocol) = eval_setup(&data, &estimator, &protocol)?;
            let alphas = alphas.unwrap_or_else(|| SWEEP_ALPHAS.to_vec());
            let sweep = guidance_sweep(&ckpt, &sources, &est, &protocol, &alphas)?;
            write_text(&out.join("sweep.json"), &serde_json::to_string_pretty(&sweep)?)?;
            write_text(&out.join("sweep.txt"), &sweep.to_table())?;
            print!("{}", sweep.to_table());
        }
        Command::Ablate {
            ckpts,
            data,
            estimator,
            alpha,
            protocol,
            out,
        } => {
            let loaded = ckpts.iter().map(|p| load_ckpt(p)).collect::<Result<Vec<_>>>()?;
            let (sources, est, protocol) = eval_setup(&data, &estimator, &protocol)?;
            let report = ablation_report(&loaded, &sources, &est, &protocol, alpha)?;
            write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
            write_text(&out.join("ablation.txt"), &report.to_table())?;
            print!("{}", report.to_table());
        }
        Command::Serve {
            ckpt,
            estimator,
            port,
            workers,
            store,
            job_ttl,
        } => {
            if workers == 0 {
                bail!("--workers must be at least 1");
            }
            let config = ServiceConfig {
                store_path: store.unwrap_or_else(|| editsvc::service::default_store_path(&ckpt)),
                model_path: ckpt,
                estimator_path: estimator,
                workers,
                job_ttl: Duration::from_secs(job_ttl),
            };
            let svc = Service::start(&config)?;
            serve(svc, port)?;
        }
    }
    Ok(())
}

fn serve(svc: Arc<Service>, port: u16) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, router(svc)).await?;
        Ok(())
    })
}
