//! AdamW with constant learning rate and global-norm gradient clipping.
//! Hand-written so its moment buffers can be checkpointed and restored for
//! bit-exact resume.

use std::collections::BTreeMap;

use candle::{backprop::GradStore, Tensor, Var};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `<= 0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    cfg: AdamWConfig,
    slots: BTreeMap<String, Slot>,
    pub step: u64,
}

impl AdamW {
    pub fn new(vars: &VarMap, cfg: AdamWConfig) -> Result<Self> {
        let data = vars.data().lock().expect("varmap lock");
        let mut slots = BTreeMap::new();
        for (name, var) in data.iter() {
            let m = var.zeros_like()?;
            let v = var.zeros_like()?;
            slots.insert(name.clone(), Slot { var: var.clone(), m, v });
        }
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Global L2 norm of all gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0f64;
        for slot in self.slots.values() {
            if let Some(g) = grads.get(slot.var.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_dtype(candle::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at optimizer step {}", self.step)));
        }
        let clip = if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else { continue };
            let g = (g * clip)?;
            slot.m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            slot.v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            if c.lr == 0.0 {
                continue;
            }
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let w = slot.var.as_tensor();
            let decayed = (w * (1.0 - c.lr * c.weight_decay))?;
            slot.var.set(&(decayed - (update * c.lr)?)?)?;
        }
        Ok(norm)
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (name, slot) in &self.slots {
            ckpt.insert_tensor(&format!("optim.m.{name}"), &slot.m)?;
            ckpt.insert_tensor(&format!("optim.v.{name}"), &slot.v)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, step: u64) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            let dtype = slot.m.dtype();
            let dev = slot.m.device().clone();
            slot.m = ckpt.tensor(&format!("optim.m.{name}"), dtype, &dev)?;
            slot.v = ckpt.tensor(&format!("optim.v.{name}"), dtype, &dev)?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::{DType, Device};
    use candle_nn::{Init, VarBuilder};

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // with bias correction the first Adam step is lr * sign(g)
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, DType::F64, &Device::Cpu);
        let w = vb.get_with_hints(3, "w", Init::Const(1.0)).unwrap();
        let loss = (&w * Tensor::new(&[2.0f64, -0.5, 0.1], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&vars, cfg).unwrap();
        opt.step(&grads).unwrap();
        let got = vars.data().lock().unwrap()["w"].as_tensor().to_vec1::<f64>().unwrap();
        let want = [0.99, 1.01, 0.99];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, DType::F64, &Device::Cpu);
        let w = vb.get_with_hints(2, "w", Init::Const(0.0)).unwrap();
        let loss = (&w * Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(&vars, AdamWConfig::default()).unwrap();
        assert!((opt.step(&grads).unwrap() - 5.0).abs() < 1e-12);
        // first moment holds the clipped gradient times (1 - beta1)
        let m = opt.slots["w"].m.to_vec1::<f64>().unwrap();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-12 && (m[1] - 0.1 * 0.8).abs() < 1e-12);
    }
}
