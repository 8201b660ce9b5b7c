//! AU dropout: the ∅ condition for classifier-free guidance, with genuine
//! no-change deltas perturbed so they stay distinguishable from ∅.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::au::{AuDelta, NUM_AUS};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutConfig {
    pub prob: f64,
    pub zero_sigma: f64,
    pub zero_mu: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            prob: 0.10,
            zero_sigma: 0.2,
            zero_mu: 0.0,
        }
    }
}

/// `u < prob` → ∅ (exact zeros). Otherwise an exactly-zero delta gets
/// per-component `N(zero_mu, zero_sigma^2)` noise drawn from `rng`, and any
/// other delta passes through.
pub fn au_dropout<R: Rng>(delta: &AuDelta, u: f64, cfg: &DropoutConfig, rng: &mut R) -> AuDelta {
    if u < cfg.prob {
        return AuDelta::zeros();
    }
    if delta.is_zero() {
        let mut v = [0.0; NUM_AUS];
        for x in v.iter_mut() {
            *x = cfg.zero_mu + cfg.zero_sigma * rng::normal_f64(rng);
        }
        return AuDelta::new(v).expect("finite perturbation");
    }
    *delta
}
