//! Linear-beta DDPM noise schedule and the forward (noising) process.

use candle::{Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Self {
        let n = cfg.num_timesteps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            candle::bail!("timestep {t} out of range 0..{}", self.len());
        }
        Ok(())
    }

    /// `(sqrt(ab_t), sqrt(1 - ab_t))` per item, each shaped `(B, 1, 1, 1)`.
    fn coefficients(&self, timesteps: &[usize], like: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut signal = Vec::with_capacity(timesteps.len());
        let mut noise = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            self.check_timestep(t)?;
            let ab = self.alpha_bars[t];
            signal.push(ab.sqrt());
            noise.push((1.0 - ab).sqrt());
        }
        let shape = (timesteps.len(), 1, 1, 1);
        let dev = like.device();
        Ok((
            Tensor::from_vec(signal, shape, dev)?.to_dtype(like.dtype())?,
            Tensor::from_vec(noise, shape, dev)?.to_dtype(like.dtype())?,
        ))
    }

    /// `z_t = sqrt(ab_t) z + sqrt(1 - ab_t) noise`, one timestep per batch
    /// item.
    pub fn forward_diffuse(&self, z: &Tensor, timesteps: &[usize], noise: &Tensor) -> Result<Tensor> {
        if z.dims() != noise.dims() {
            candle::bail!("forward_diffuse: latent {:?} vs noise {:?}", z.dims(), noise.dims());
        }
        if z.dim(0)? != timesteps.len() {
            candle::bail!("forward_diffuse: batch {} but {} timesteps", z.dim(0)?, timesteps.len());
        }
        let (s, n) = self.coefficients(timesteps, z)?;
        z.broadcast_mul(&s)? + noise.broadcast_mul(&n)?
    }
}

/// Scalar form of the forward process, used by oracles.
pub fn forward_diffuse_scalar(sched: &NoiseSchedule, z: f64, t: usize, noise: f64) -> f64 {
    let ab = sched.alpha_bars[t];
    ab.sqrt() * z + (1.0 - ab).sqrt() * noise
}
